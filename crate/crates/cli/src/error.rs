use std::path::PathBuf;

use crate::config::ConfigError;

/// Failures of a pipeline run, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("missing {}; run the '{stage}' stage first", path.display())]
    MissingInput { path: PathBuf, stage: &'static str },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Csv { path: PathBuf, message: String },
    #[error("{context}: {source}")]
    Numerical {
        context: String,
        source: fppg::Error,
    },
    #[error("{} of the requested tasks failed:\n  {}", failures.len(), failures.join("\n  "))]
    Partial { failures: Vec<String> },
}

impl CliError {
    /// 2 for configuration problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numerical { .. } | Self::Partial { .. } => 3,
            Self::MissingInput { .. } | Self::Io { .. } | Self::Csv { .. } => 1,
        }
    }

    pub(crate) fn numerical(context: impl Into<String>, source: fppg::Error) -> Self {
        Self::Numerical {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
