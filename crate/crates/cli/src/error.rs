use std::path::PathBuf;

use photocal_core::CalError;
use thiserror::Error;

/// Failure of a pipeline, grouped by the exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Convergence(_) => 4,
            Self::Io { .. } => 5,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Reclassifies a core error raised while interpreting configuration.
    pub fn config(err: CalError) -> Self {
        match Self::from(err) {
            Self::Data(msg) => Self::Config(msg),
            other => other,
        }
    }
}

impl From<CalError> for CliError {
    fn from(err: CalError) -> Self {
        match err {
            CalError::Io(e) => Self::Io { path: PathBuf::new(), source: e },
            CalError::FitFailed { .. } | CalError::Optimizer(_) => Self::Convergence(err.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
