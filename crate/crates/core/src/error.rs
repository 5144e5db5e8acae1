use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value during density evaluation at atomic transform {layer}: {context}")]
    DensityEvaluation { layer: usize, context: String },

    #[error("invertibility violation: round-trip residual {residual:e} exceeds {tolerance:e}")]
    Invertibility { residual: f64, tolerance: f64 },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("training failed for job {job}: {reason}")]
    TrainingFailure { job: String, reason: String },

    #[error("row alignment error: {0}")]
    Alignment(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("non-finite values in {path} at rows {rows:?}")]
    NonFiniteData { path: PathBuf, rows: Vec<usize> },

    #[error("probe failed at layer {layer}: {reason}")]
    Probe { layer: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than configuration or
    /// numerical failure.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::CorruptFile { .. }
                | Error::NonFiniteData { .. }
                | Error::Alignment(_)
                | Error::InsufficientData(_)
                | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
