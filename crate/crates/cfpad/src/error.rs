//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// One or more config fields violate their stated range; every offending
    /// field is listed by name with its value.
    #[error("config validation failed:\n  {}", violations.join("\n  "))]
    InvalidConfig { violations: Vec<String> },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Whether this error is an input/validation problem (CLI exit code 1)
    /// as opposed to a runtime failure (exit code 2).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. }
                | Error::ShapeMismatch(_)
                | Error::InvalidArgument(_)
                | Error::Data(_)
                | Error::Parse { .. }
                | Error::Metric(_)
                | Error::Checkpoint(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
