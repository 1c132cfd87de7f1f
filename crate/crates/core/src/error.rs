use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask row {0} has no unmasked entries")]
    DegenerateMaskRow(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sentinel sequence not present in cache")]
    CacheMiss,

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("strategy `{strategy}` is not available in {mode} mode")]
    Capability { strategy: String, mode: String },

    #[error("training failure: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
