use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point is behind the camera (z = {z:.3e})")]
    BehindCamera { z: f64 },

    #[error("depth must be positive (got {depth})")]
    InvalidDepth { depth: f64 },

    #[error("scene load error at {path}: {reason}")]
    SceneLoad { path: PathBuf, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("empty cloud: {0}")]
    EmptyCloud(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no points project in front of the camera")]
    EmptyRender,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
