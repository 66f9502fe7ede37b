//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("domain error in {context}: {message}")]
    Domain { context: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed header in {path}: {message}")]
    MalformedHeader { path: String, message: String },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("dtype mismatch in {path}: expected {expected}, found {found}")]
    DtypeMismatch {
        path: String,
        expected: String,
        found: String,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("training aborted: {0}")]
    Train(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

impl Error {
    pub fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        got: impl std::fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    pub fn domain(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Domain {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
