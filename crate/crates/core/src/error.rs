use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Error, Debug)]
pub enum FishrError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("decomposition failed: {0}")]
    Decomposition(String),
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("bad magic number {found:#010x} at offset {offset} in {path} (expected {expected:#010x})")]
    BadMagic {
        path: PathBuf,
        offset: usize,
        found: u32,
        expected: u32,
    },
    #[error("truncated file {path}: needed {needed} bytes at offset {offset}, found {available}")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("missing data file {}: {hint}", path.display())]
    MissingData { path: PathBuf, hint: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FishrError>;
