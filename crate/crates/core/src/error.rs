use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("covariance matrix is not positive definite (after jitter retry)")]
    NotPositiveDefinite,

    #[error("matrix is not strictly diagonally dominant (row {row}: margin {margin})")]
    NotDiagonallyDominant { row: usize, margin: f64 },

    #[error("kernel variance must be 1 for the RKHS release, got {0}")]
    UnnormalizedKernel(f64),

    #[error(
        "lambda optimisation did not converge after {restarts} restart(s); \
         best delta {best_delta}, best step norm {best_step}"
    )]
    NotConverged {
        restarts: usize,
        best_delta: f64,
        best_step: f64,
        best_lambdas: Vec<f64>,
    },

    #[error("point {index} {point:?} lies outside the bin grid")]
    OutOfRange { index: usize, point: Vec<f64> },

    #[error("degenerate fold {fold}: {reason}")]
    DegenerateFold { fold: usize, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("too many failed folds: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
