use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum PepgError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid transition row ({state}, {action}): sums to {sum}")]
    InvalidTransition { state: usize, action: usize, sum: f64 },
    #[error("reward {value} at ({state}, {action}) exceeds bound {bound}")]
    RewardOutOfRange { state: usize, action: usize, value: f64, bound: f64 },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("zero policy probability at ({state}, {action})")]
    ZeroProbability { state: usize, action: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("linear solve failed: {0}")]
    Singular(String),
    #[error("solver did not converge: {0}")]
    NoConvergence(String),
    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PepgError>;

impl PepgError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        PepgError::Config { key: key.into(), reason: reason.into() }
    }
}
