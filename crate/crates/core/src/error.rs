use thiserror::Error;

/// Errors produced anywhere in the selection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("covariance is not positive definite")]
    SingularCovariance,
    #[error("component count {n} out of range 1..={max}")]
    BadComponentCount { n: usize, max: usize },
    #[error("invalid weights: {0}")]
    BadWeights(String),
    #[error("incomplete store: {0}")]
    IncompleteStore(String),
    #[error("label {label} out of range for {n_domains} domains")]
    BadLabel { label: usize, n_domains: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("at least two sessions are required, got {0}")]
    NotEnoughSessions(usize),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    pub(crate) fn dims(expected: usize, got: usize) -> Self {
        Error::DimMismatch { expected, got }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
