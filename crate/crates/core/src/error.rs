use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the deblurring toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unreadable file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },

    #[error("unsupported bit depth {0}")]
    UnsupportedBitDepth(u32),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("kernel larger than image in valid mode ({kernel} vs {width}x{height})")]
    KernelTooLarge {
        kernel: usize,
        width: usize,
        height: usize,
    },

    #[error("spectrum is not conjugate symmetric (deviation {0:e})")]
    NotSymmetric(f64),

    #[error("too few samples for whitening: {got} < {need}")]
    TooFewSamples { got: usize, need: usize },

    #[error("kernel synthesis failed after {0} retries")]
    SynthesisFailed(usize),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at iteration {0}")]
    Diverged(usize),

    #[error("insufficient texture for kernel estimation")]
    InsufficientTexture,

    #[error("degenerate oracle: reference MSE is zero")]
    DegenerateOracle,

    #[error("malformed weights file: {0}")]
    BadWeights(String),

    #[error("malformed kernel file: {0}")]
    BadKernel(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn unreadable(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::UnreadableFile {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
