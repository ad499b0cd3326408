use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid cluster count k={k} for n={n} (k_max={k_max})")]
    InvalidK { k: usize, n: usize, k_max: usize },

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("sequence too short: need at least {min} elements, got {actual}")]
    SequenceTooShort { min: usize, actual: usize },

    #[error("index out of range: {index} (n={n})")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("label length mismatch: pred={pred}, truth={truth}")]
    LengthMismatch { pred: usize, truth: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step} (batch seed {batch_seed})")]
    NonFiniteLoss { step: u64, batch_seed: u64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("corrupt model container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
