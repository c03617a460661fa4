use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix logarithm undefined: {0}")]
    LogDomain(String),

    #[error(
        "matrix is singular or too ill-conditioned (condition estimate {condition:e}): {context}"
    )]
    Rank { context: String, condition: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("metric projection is not unique at this point")]
    NonUnique,

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing state: {0}")]
    State(String),

    #[error("objective diverged: {0}")]
    Divergence(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("study failed: {0}")]
    Study(String),

    #[error("index out of range: {0}")]
    Index(String),
}

pub type Result<T> = std::result::Result<T, Error>;
