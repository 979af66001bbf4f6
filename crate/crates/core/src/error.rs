use thiserror::Error;

/// Errors raised by the modeling toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("ill-conditioned system: {0}")]
    Conditioning(String),

    #[error("optimizer diverged: {0}")]
    Diverged(String),

    #[error("ambiguous input matching: {0}")]
    AmbiguousMatch(String),

    #[error("data is not subset-structured ({unmatched} unmatched high-fidelity samples); use the non-subset path")]
    NotSubset { unmatched: usize },

    #[error("unaligned fidelities: {0}")]
    Unaligned(String),

    #[error("rank deficient factor: {0}")]
    RankDeficient(String),

    #[error("problem too large for this path: {0}")]
    TooLarge(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("fit failed at level {level}: {source}")]
    Level {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
