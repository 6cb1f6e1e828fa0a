use std::path::PathBuf;

use thiserror::Error;

use crate::graph::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric error: {op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid model: {}", format_diagnostics(.0))]
    InvalidModel(Vec<Diagnostic>),

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("infeasible target: {0}")]
    Infeasible(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: file has format version {found}, this build reads {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("model hash mismatch: checkpoint was written for {checkpoint}, live model spec is {expected}")]
    HashMismatch { checkpoint: String, expected: String },

    #[error("truncated checkpoint {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("training aborted at epoch {epoch}, step {step}: {message}")]
    Diverged { epoch: usize, step: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
