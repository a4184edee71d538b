use std::path::PathBuf;

use crate::train::LossRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite gradient for parameter tensor {name}")]
    NonFiniteGradient { name: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("backward already ran on this graph; record a new forward pass first")]
    BackwardReused,

    #[error("objective increased at step {step} ({before} -> {after}); reduce the step size")]
    StepSize { step: usize, before: f64, after: f64 },

    #[error("training failed at iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        trace: Vec<LossRecord>,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt image header: {0}")]
    CorruptHeader(String),

    #[error("image dimensions overflow: {width}x{height}")]
    DimensionOverflow { width: u64, height: u64 },

    #[error("truncated image data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png: {0}")]
    Png(String),

    #[error("config file: {0}")]
    ConfigFile(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
