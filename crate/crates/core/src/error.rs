use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the support or admissible domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Sieve weights violate the copula constraints beyond tolerance.
    #[error("infeasible sieve weights: {0}")]
    Infeasible(String),

    #[error("failed to converge after {iterations} iterations: {context}")]
    NonConvergence { iterations: usize, context: String },

    #[error("singular matrix: {0}")]
    Singular(String),

    /// Requested target cannot be reached by the family (e.g. Spearman calibration).
    #[error("out of range: {0}")]
    Range(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("data error at line {line}: {message}")]
    Data { line: usize, message: String },

    #[error("empty series: {0}")]
    Empty(String),

    #[error("too many failed replications: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for errors caused by malformed input data rather than numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Data { .. } | Error::Empty(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_)
        )
    }
}
