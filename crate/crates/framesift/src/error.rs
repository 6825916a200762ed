//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data failed a content check (non-finite values, duplicate
    /// identities, empty classes, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A file did not match its declared binary or text layout.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// An underlying I/O operation failed.
    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Optimization failed to make progress.
    #[error("training error: {0}")]
    Training(String),

    /// A pipeline configuration cannot be run.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 for validation-class errors,
    /// 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::Validation(_)
            | Error::Format { .. }
            | Error::Config(_) => 1,
            Error::Storage { .. } | Error::Training(_) => 2,
        }
    }
}
