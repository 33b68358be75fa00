//! Error taxonomy shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, FdError>;

#[derive(Debug, Error)]
pub enum FdError {
    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),
    #[error("unpaired dataset file: {0}")]
    Pairing(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerics error: {0}")]
    Numerics(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("weight load error: {0}")]
    WeightLoad(String),
    #[error("refusing: {0} (pass --force to overwrite)")]
    Refusal(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FdError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        FdError::Image {
            path: path.into(),
            source,
        }
    }
}
