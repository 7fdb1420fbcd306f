//! Shared error type for the whole library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension error in {op}: {details}")]
    Dimension { op: &'static str, details: String },

    /// Invalid configuration (bad preset name, inconsistent sizes, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An API contract was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Text input (manifest CSV, PGM, config file) could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Checkpoint file is malformed or does not match the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Split planning could not satisfy the requested granularity.
    #[error("planning error: {0}")]
    Planning(String),

    /// Class-weight computation hit a class with no positive samples.
    #[error("weighting error: class {class} has zero positive samples; cap weights or fix the data")]
    Weighting { class: usize },

    /// Metric is undefined for the given inputs (e.g. single-class AUROC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A loss or activation became NaN/Inf.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training aborted (NaN loss etc.), with the offending batch index.
    #[error("training aborted at batch {batch}: {msg}")]
    TrainAbort { batch: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, details: impl Into<String>) -> Self {
        Error::Dimension { op, details: details.into() }
    }
}
