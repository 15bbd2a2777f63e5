use thiserror::Error;

/// Errors raised by the tensor engine and its I/O helpers.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid shape: {detail}")]
    InvalidShape { detail: String },

    #[error("{op}: non-finite value produced (NaN or overflow)")]
    NonFinite { op: &'static str },

    #[error("softmax: slice {row} contains only -inf entries")]
    DegenerateSoftmaxRow { row: usize },

    #[error("backward: loss must be a scalar, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("gradient check failed: max relative error {max_rel_err:.3e} at {worst}")]
    GradCheckFailed { max_rel_err: f64, worst: String },

    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
