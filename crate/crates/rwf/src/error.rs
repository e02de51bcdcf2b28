//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RwfError {
    /// Incompatible matrix/vector shapes, e.g. in a product or elementwise op.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value that must be finite (no NaN/Inf) was not.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Invalid configuration (bad field value, unknown key, inconsistent combo).
    #[error("config error: {0}")]
    Config(String),

    /// Violation of stream semantics (double iteration, label outside task, ...).
    #[error("stream error: {0}")]
    Stream(String),

    /// Malformed binary container (dataset or checkpoint file).
    #[error("format error: {0}")]
    Format(String),

    /// Invalid argument to a numerical operation.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl RwfError {
    /// Exit code contract: 0 success, 1 config error, 2 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RwfError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, RwfError>;
