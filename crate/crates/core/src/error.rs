use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}` in CSV header")]
    MissingColumn(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("curve `{curve}` has duplicate observation time {time}")]
    DuplicateTime { curve: String, time: f64 },

    #[error("index {index} out of range 1..={max}")]
    Index { index: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("value {value} outside domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("unknown curve `{0}`")]
    UnknownCurve(String),

    #[error("unsupported fit file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
