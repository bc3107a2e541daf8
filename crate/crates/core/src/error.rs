use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("source too small: {height}x{width} source cannot hold a {patch}x{patch} patch")]
    SourceTooSmall { height: usize, width: usize, patch: usize },

    #[error("unexpected HR size: expected {expected}x{expected}, got {height}x{width}")]
    UnexpectedHrSize {
        expected: usize,
        height: usize,
        width: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("non-differentiable configuration: q = {q} requires epsilon > 0")]
    NonDifferentiable { q: f64 },

    #[error("degenerate reference: reference image has zero norm")]
    DegenerateReference,

    #[error("degenerate variance structure: local variance maps are flat but differ")]
    DegenerateVariance,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient pairs: need {needed}, have {available}")]
    InsufficientPairs { needed: usize, available: usize },

    #[error("encoder required: lambda_M > 0 needs a pre-trained encoder")]
    EncoderRequired,

    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("missing pairs: {0:?}")]
    MissingPairs(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// True for errors caused by user configuration rather than runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_) | Error::Parse { .. })
    }
}
