use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] lmmsdp_core::Error),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Parse { path: path.into(), message: message.into() }
    }

    /// Process exit code: 2 for infeasible calibrations, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(lmmsdp_core::Error::InfeasibleCalibration { .. }) => 2,
            _ => 1,
        }
    }
}
