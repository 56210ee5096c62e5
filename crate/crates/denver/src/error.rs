//! Error types shared across the pipeline.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum DenverError {
    #[error("input error: {0}")]
    Input(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("stage order error: {0}")]
    StageOrder(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for DenverError {
    fn from(e: image::ImageError) -> Self {
        DenverError::Image(e.to_string())
    }
}

impl From<serde_json::Error> for DenverError {
    fn from(e: serde_json::Error) -> Self {
        DenverError::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DenverError>;
