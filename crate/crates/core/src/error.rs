use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum MecaError {
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e}, tolerance {tolerance:e})")]
    NonSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("Jacobi eigensolver did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix is degenerate: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("bad shape: {0}")]
    BadShape(String),

    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NumericalDivergence { epoch: usize, step: usize },

    #[error("bad parameters: {0}")]
    BadParams(String),

    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    TruncatedFile {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },

    #[error("sweep needs at least {needed} successful records, got {got}")]
    InsufficientRecords { needed: usize, got: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl MecaError {
    /// Failures caused by the numbers themselves rather than by shapes,
    /// configuration or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MecaError::NonFinite(_)
                | MecaError::NonSymmetric { .. }
                | MecaError::NoConvergence { .. }
                | MecaError::Degenerate(_)
                | MecaError::NumericalDivergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, MecaError>;
