use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error)]
pub enum FedError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in layer {layer}")]
    Numeric { layer: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FedError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FedError::Shape(msg.into()))
}
