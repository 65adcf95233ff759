//! Crate-wide error type.

use thiserror::Error;

/// Errors reported by library operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("invalid truncation: requested {requested} of {available} columns")]
    InvalidTruncation { requested: usize, available: usize },

    #[error("columns are not orthonormal: max deviation {max_dev:e}")]
    NotOrthonormal { max_dev: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid partition: label {label} outside [0, {class_count})")]
    InvalidPartition { label: usize, class_count: usize },

    #[error("class {class_id} has no samples")]
    EmptyClass { class_id: usize },

    #[error("inconsistent messages: {0}")]
    InconsistentMessages(String),

    #[error("corrupt message: {0}")]
    CorruptMessage(String),

    #[error("coverage infeasible: agent ranks sum to {available}, need at least {required}")]
    CoverageInfeasible { required: usize, available: usize },

    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("configuration error: {0}")]
    ConfigError(String),

    #[error("metric unavailable: {0}")]
    MetricUnavailable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
