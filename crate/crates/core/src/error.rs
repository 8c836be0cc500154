//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration supplied by the caller (bad schedule bounds,
    /// unknown dataset, stage index out of range, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Tensor shape mismatch; indicates a caller bug rather than bad data.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed or inconsistent input data (unpaired samples, non-binary
    /// masks, empty captions, ...).
    #[error("invalid data: {0}")]
    Data(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    /// The generator failed to produce an acceptable sample within the
    /// configured rejection limit.
    #[error("degenerate generator: {0}")]
    DegenerateGenerator(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
