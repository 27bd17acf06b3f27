//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by estimators, models, the simulator, and file IO.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix/vector dimensions are mutually inconsistent.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value is out of range or self-contradictory.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A numerical operation failed (singular matrix, non-PD factorization, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An input value is NaN or infinite where a finite value is required.
    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// Training diverged; the message carries the last stable loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// An operation requires non-empty input.
    #[error("empty input: {0}")]
    Empty(String),

    /// File or serialization failure.
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
