//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value (bad margin, rate out of range, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated a documented numeric contract (non-unit vector, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or Inf showed up where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed dataset file.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
