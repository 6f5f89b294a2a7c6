//! Crate-wide error type.

/// Errors surfaced by the fusion library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// A configuration value violates its documented constraints.
    #[error("config error: {0}")]
    Config(String),
    /// An input is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Training produced a non-finite quantity or was otherwise aborted.
    #[error("training error: {0}")]
    Training(String),
    /// A scene or checkpoint file could not be decoded.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn training(msg: impl Into<String>) -> Self {
        Error::Training(msg.into())
    }
}
