//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
///
/// Recoverable "soft" outcomes (a non-reducible diffusion, a −∞
/// log-likelihood) are encoded in result types, not here.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a precondition (dimension mismatch, bad range…).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A named resource (catalog entry, file, model) does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// Newton inversion of the Lamperti map failed to converge.
    #[error("inversion failure at point {point:?} (t = {t}): residual {residual:.3e} after {iterations} iterations")]
    InversionFailure {
        point: Vec<f64>,
        t: f64,
        residual: f64,
        iterations: usize,
    },

    /// A non-finite loss or gradient appeared during training.
    #[error("training diverged at epoch {epoch}: {detail}")]
    TrainingDiverged { epoch: usize, detail: String },

    /// Input data is too degenerate for the requested computation
    /// (e.g. rank-deficient covariance in affine alignment).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// Filesystem problem while persisting or loading artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed JSON metadata.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A binary array file had the wrong magic, version, or length.
    #[error("bad file format: {0}")]
    BadFormat(String),
}

pub type Result<T> = std::result::Result<T, Error>;
