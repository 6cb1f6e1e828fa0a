use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use s2hprune::{dispatch, parse_config, CliError, Command, OUT_ENV};

#[derive(Parser)]
#[command(name = "s2hprune", version, about = "Differentiable structural pruning with soft-to-hard distillation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train masks and weights, writing checkpoints, trajectory and report.
    Prune(Args),
    /// Report metrics of a checkpoint (default: the run's final one).
    Eval(Args),
    /// Write the physically sliced network of a checkpoint.
    Export(Args),
    /// Sample random masks at the target and train that network from scratch.
    RandomBaseline(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to continue from (prune) or to read (eval, export).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cmd, args) = match cli.command {
        Cmd::Prune(a) => (Command::Prune, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::Export(a) => (Command::Export, a),
        Cmd::RandomBaseline(a) => (Command::RandomBaseline, a),
    };
    let mut cfg = parse_config(&args.config)?;
    let out = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    cfg.apply_overrides(args.seed, out);
    let summary = dispatch(cmd, &cfg, args.resume.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            let err = CliError::Usage(first);
            eprintln!("{}", err.diagnostic_line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.diagnostic_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
