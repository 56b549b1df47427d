use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The stacked input/disturbance Hankel matrix lost full row rank, so the
    /// lower-level KKT matrix is singular (data not persistently exciting).
    #[error("KKT factorization failed: input/disturbance Hankel matrix is rank deficient ({0})")]
    RankDeficient(String),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("QP infeasible: {detail}")]
    Infeasible {
        detail: String,
        /// Index of the constraint row carrying the largest certificate weight.
        row: Option<usize>,
    },

    #[error("QP unbounded: {0}")]
    Unbounded(String),

    #[error("QP solver failed: {0}")]
    Solver(String),

    #[error("RLS covariance lost positive definiteness; reset required")]
    RlsReset,

    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    #[error("unpaired comparison: {0}")]
    Unpaired(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension { context, expected, got }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
