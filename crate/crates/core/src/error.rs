use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("sequence contains <unk> at position {0}")]
    UnknownToken(usize),

    #[error("malformed structure at token {position}: {reason}")]
    MalformedStructure { position: usize, reason: String },

    #[error("ground truth does not parse: {0}")]
    InvalidGroundTruth(String),

    #[error("cannot evaluate an empty corpus")]
    EmptyCorpus,

    #[error("every target position is ignored")]
    AllIgnored,

    #[error("invalid learning-rate schedule: {0}")]
    InvalidSchedule(String),

    #[error("image {height}x{width} is not divisible by patch size {patch}")]
    IndivisibleImage { height: usize, width: usize, patch: usize },

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("code index {index} out of range for codebook of size {k}")]
    IndexOutOfRange { index: usize, k: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("mask ratio must lie in [0, 1], got {0}")]
    InvalidRatio(f64),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("sequence of length {len} exceeds decoder maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("table grid {rows}x{cols} does not fit a {height}x{width} image")]
    GridOverflow { rows: usize, cols: usize, height: usize, width: usize },

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::UnknownToken(_) => "UnknownToken",
            Error::MalformedStructure { .. } => "MalformedStructure",
            Error::InvalidGroundTruth(_) => "InvalidGroundTruth",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::AllIgnored => "AllIgnored",
            Error::InvalidSchedule(_) => "InvalidSchedule",
            Error::IndivisibleImage { .. } => "IndivisibleImage",
            Error::InvalidTemperature(_) => "InvalidTemperature",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::InvalidRatio(_) => "InvalidRatio",
            Error::ConfigMismatch(_) => "ConfigMismatch",
            Error::CheckpointMismatch(_) => "CheckpointMismatch",
            Error::SequenceTooLong { .. } => "SequenceTooLong",
            Error::GridOverflow { .. } => "GridOverflow",
            Error::MalformedRecord { .. } => "MalformedRecord",
            Error::Config(_) => "ConfigError",
            Error::Io { .. } => "IoError",
            Error::Image(_) => "ImageError",
            Error::Json(_) => "JsonError",
        }
    }
}
