use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] s2h_core::Error),
}

impl CliError {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        use s2h_core::Error as E;
        match self {
            CliError::Config { .. } => "config",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Core(e) => match e {
                E::Config { .. } => "config",
                E::InvalidModel(_) => "model",
                E::Infeasible(_) => "infeasible",
                E::Checkpoint(_) | E::CheckpointVersion { .. } | E::HashMismatch { .. } | E::Truncated { .. } => "checkpoint",
                E::Format { .. } | E::Csv(_) | E::Json(_) => "format",
                E::Io(_) => "io",
                E::Diverged { .. } | E::NonFinite { .. } => "numeric",
                E::Shape { .. } | E::Contract(_) => "internal",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "usage" => 2,
            "config" | "model" => 3,
            "infeasible" => 4,
            "checkpoint" => 5,
            "io" | "format" => 6,
            "numeric" => 7,
            _ => 1,
        }
    }

    /// `s2hprune: error[<kind>]: <message>` on a single line.
    pub fn diagnostic_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("s2hprune: error[{}]: {msg}", self.kind())
    }
}
