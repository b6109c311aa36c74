use thiserror::Error;

/// Errors produced by volume handling, transforms, the network and the
/// registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent grid geometry (dims, spacing, data length).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Array or tensor shape mismatch.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Degenerate numerical input (constant volume, empty mask, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed file contents (bad header, wrong payload size).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
