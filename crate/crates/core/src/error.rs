use std::io;

use thiserror::Error;

/// Errors produced anywhere in the ingestion, training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },
    #[error("model file error: {0}")]
    ModelFormat(String),
    #[error("provenance mismatch: {0}")]
    Provenance(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let row = err
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or_default();
        Error::Parse {
            row,
            message: err.to_string(),
        }
    }
}
