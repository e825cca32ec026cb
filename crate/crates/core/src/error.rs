use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the detector toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("scene spec line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("value {value} for `{feature}` is outside [{lo}, {hi}]")]
    Domain {
        feature: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("duplicate scene name `{0}`")]
    DuplicateScene(String),

    #[error("segment id {id} is not registered (renderer has {registered} patterns)")]
    UnknownSegment { id: u32, registered: u32 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate entropy: feature takes a single value")]
    DegenerateEntropy,

    #[error("no scene has variance in any feature; cannot form partitions")]
    NoPartitions,

    #[error("variance undefined for fewer than two samples (count = {0})")]
    UndefinedVariance(u64),

    #[error("kernel matrix not positive definite after {0} jitter escalations")]
    NotPositiveDefinite(usize),

    #[error("single-frame scene `{0}`: at least two frames required")]
    SingleFrameScene(String),

    #[error("latent set is empty")]
    EmptyLatentSet,

    #[error("p-value {0} outside (0, 1]")]
    InvalidPValue(f64),

    #[error("format error in {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("checksum mismatch in {0}")]
    Checksum(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
