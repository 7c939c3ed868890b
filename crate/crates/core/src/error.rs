use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("corrupt or incompatible file: {0}")]
    Corrupt(String),

    #[error("config mismatch: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at step {step} (batch windows {batch:?})")]
    NonFinite {
        step: usize,
        batch: Vec<usize>,
        loss: f64,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure stems from bad user input rather than the environment.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Image { .. } | Error::NonFinite { .. } | Error::Resource(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
