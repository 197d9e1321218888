//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or extents violate an operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An API was called outside its contract (non-scalar loss, missing grad, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed file content; `offset` is the byte position of the failing field.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    /// The metric is not defined on this input (zero variance, all ties).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    pub fn undefined_metric(msg: impl Into<String>) -> Self {
        Error::UndefinedMetric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
