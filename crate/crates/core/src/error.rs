use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or unsupported file contents.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A precondition on an argument was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numerical procedure failed (rank deficiency, degenerate statistics).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An optimization loop produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch} on image {image}")]
    NonFiniteLoss { epoch: usize, image: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
