use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("checkpoint mismatch: parameter `{name}` {reason}")]
    CheckpointMismatch { name: String, reason: String },

    #[error("missing ids: {}", .0.join(", "))]
    MissingIds(Vec<String>),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad user input rather than a runtime failure.
    pub fn is_invalid_input(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Format { .. }
                | Error::Json { .. }
                | Error::CheckpointMismatch { .. }
                | Error::MissingIds(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
