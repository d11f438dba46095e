use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MilrError>;

#[derive(Debug, Error)]
pub enum MilrError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("inconsistent bag label in bag '{bag}' (row {row})")]
    InconsistentLabel { bag: String, row: usize },

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate column {column}: non-positive curvature {denom}")]
    DegenerateColumn { column: usize, denom: f64 },

    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,

    #[error("non-finite value during fit at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("no valid tuning parameter: {0}")]
    NoValidLambda(String),

    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
}

impl MilrError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MilrError::InvalidArgument(msg.into())
    }
}
