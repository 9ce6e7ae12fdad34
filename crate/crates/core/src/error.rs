use std::path::PathBuf;

/// Errors raised across the segmentation toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated data in {path}: expected {expected} bytes, found {found}")]
    Truncation {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("dataset integrity error: {0}")]
    Integrity(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("placement error: {0}")]
    Placement(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

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

    /// True for errors caused by invalid user configuration or inputs that
    /// fail validation, as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parameter(_) | Error::Format(_) | Error::Integrity(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
