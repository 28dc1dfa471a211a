use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CropError>;

#[derive(Debug, Error)]
pub enum CropError {
    /// Shapes or dimensions that do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    /// Caller supplied arguments the operation cannot work with.
    #[error("usage error: {0}")]
    Usage(String),

    /// A NaN or infinity showed up where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CropError {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        CropError::Structural(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        CropError::Usage(msg.into())
    }
}
