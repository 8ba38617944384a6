use thiserror::Error;

pub type Result<T> = std::result::Result<T, FlowError>;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum FlowError {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// Invalid configuration value or combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed file contents (checkpoints, .flo, PPM/PGM, manifests).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A NaN or infinity surfaced where the contract requires finite values.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

impl FlowError {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        FlowError::ShapeMismatch {
            op,
            details: details.into(),
        }
    }
}
