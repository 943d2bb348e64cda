use thiserror::Error;

/// Errors raised by the numerical core, losses, models and training loops.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("row {row} has zero norm and cannot be normalized")]
    DegenerateRow { row: usize },

    #[error("batch of {n} rows is too small (need at least {min})")]
    BatchTooSmall { n: usize, min: usize },

    #[error("degenerate batch: mean distance of row {row} is zero")]
    DegenerateBatch { row: usize },

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Diverged { epoch: usize, batch: usize, message: String },

    #[error("epoch {epoch}, batch {batch}: {source}")]
    Batch {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }

    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch { expected: expected.to_string(), actual: actual.to_string() }
    }
}
