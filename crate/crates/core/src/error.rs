use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum DetaError {
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("finite-difference oracle failed: {0}")]
    OracleFailure(String),

    #[error("parse error: {0}")]
    ParseError(String),

    #[error("schema error: {0}")]
    SchemaError(String),

    #[error("missing weight for sample {0}")]
    MissingWeight(u64),

    #[error("class {0} has no members")]
    EmptyClass(usize),

    #[error("divergence at iteration {iteration}: {reason}")]
    DivergenceError { iteration: usize, reason: String },

    #[error("io error: {0}")]
    IoError(#[from] std::io::Error),
}

pub type Result<T, E = DetaError> = std::result::Result<T, E>;

impl DetaError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DetaError::InvalidParameter(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        DetaError::DegenerateVector(msg.into())
    }
}
