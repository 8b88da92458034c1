use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported precision: {0} bits (expected 16, 32 or 64)")]
    UnsupportedPrecision(u32),

    #[error("need at least {needed} logits, got {got}")]
    TooFewClasses { needed: usize, got: usize },

    #[error("non-finite logit at index {0}")]
    NonFiniteLogit(usize),

    #[error("class index {index} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, classes: usize },

    #[error("scale factor must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("reference rank must be 1 or 2, got {0}")]
    BadReferenceRank(usize),

    #[error("degenerate logit gap {0:e}")]
    DegenerateGap(f64),

    #[error("scenario {scenario} is inconsistent with label rank {rank}")]
    ScenarioMismatch { scenario: &'static str, rank: usize },

    #[error("no stationary point found below t = {0:e}")]
    NoStationaryPoint(f64),

    #[error("invalid grid: {0}")]
    InvalidGrid(&'static str),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: unexpected magic 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: truncated file (needed {needed} bytes, found {found})")]
    Truncated { path: PathBuf, needed: usize, found: usize },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: malformed weights manifest: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
