use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A value violates a construction-time constraint.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was called outside its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training aborted because the loss left the finite range.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Checkpoint container is malformed or from an unknown schema.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Dataset file is malformed or violates shape constraints.
    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
