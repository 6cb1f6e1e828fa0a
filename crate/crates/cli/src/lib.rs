//! Command-line front end: run configuration files, the `prune`, `eval`,
//! `export` and `random-baseline` commands, and their on-disk artifacts.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{dispatch, Command};
pub use config::{parse_config, parse_config_str, DatasetSpec, RunConfigFile, OUT_ENV};
pub use error::CliError;
