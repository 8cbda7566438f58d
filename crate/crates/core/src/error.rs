use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an argument was violated (sizes, ranges, scale factors).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("malformed kernel file {path}: {msg}")]
    KernelFormat { path: PathBuf, msg: String },

    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

macro_rules! domain {
    ($($arg:tt)*) => { $crate::error::Error::Domain(format!($($arg)*)) };
}
pub(crate) use domain;
