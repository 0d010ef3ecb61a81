//! Library-wide error type. Variants are grouped by failure domain rather
//! than by module so callers can match on what went wrong, not where.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected}, got {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("pixel ({row}, {col}) outside image bounds {height}x{width}")]
    PixelOutOfBounds {
        row: f64,
        col: f64,
        height: usize,
        width: usize,
    },

    #[error("camera pose invalid: {0}")]
    InvalidPose(String),

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite values detected in {context}{}", detail.as_ref().map(|d| format!(" ({d})")).unwrap_or_default())]
    NonFinite {
        context: &'static str,
        detail: Option<String>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Store(#[from] sparseview_autodiff::StoreError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
