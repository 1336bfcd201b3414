//! Error types shared across the pipeline.

use thiserror::Error;

/// Errors raised by any stage of the pipeline.
#[derive(Error, Debug)]
pub enum Error {
    /// A point cloud has no usable extent (all points coincide) or is empty.
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),

    /// A synthetic class name is not in the shape library.
    #[error("unknown shape class: {0}")]
    UnknownShape(String),

    /// Invalid configuration value or range.
    #[error("config error: {0}")]
    Config(String),

    /// Array dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A feature vector has zero norm where a direction is required.
    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),

    /// A cached forward state no longer matches the current parameters.
    #[error("stale forward state: {0}")]
    StaleState(String),

    /// Binary or text file does not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// Dataset manifest is inconsistent.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Session protocol violation (ordering, class leakage, missing data).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Numeric data is unusable (NaN/Inf or empty where content is required).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
