use thiserror::Error;

/// Errors surfaced by the harness core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("federated training diverged at round {round}: {detail}")]
    FlDivergence { round: usize, detail: String },

    #[error("unknown architecture id: {0}")]
    UnknownArch(String),

    #[error("encoding specs differ: {0}")]
    EncodingMismatch(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("weight store format error: {0}")]
    WeightFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
