use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Variants fall in two classes: problems with bytes on disk (decoding,
/// I/O) and problems with the request itself (arguments, schemas).
/// [`Error::is_data_error`] tells them apart.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("header is not parseable: {0}")]
    Header(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("overlapping or misplaced buffer for tensor '{0}'")]
    Overlap(String),

    #[error("corrupt data in tensor '{0}': payload contains NaN")]
    NanPayload(String),

    #[error("tensor '{name}': nbytes {nbytes} does not match shape {shape:?}")]
    SizeMismatch {
        name: String,
        shape: Vec<usize>,
        nbytes: u64,
    },

    #[error("tensor '{name}' has {elements} elements, above the format limit of 2^32-1")]
    TooLarge { name: String, elements: usize },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("missing tensor '{0}'")]
    MissingTensor(String),

    #[error("shape mismatch for '{name}': {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown modality '{0}'")]
    UnknownModality(String),

    #[error("training diverged for seed {seed} at step {step}")]
    Diverged { seed: u64, step: usize },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by unreadable or corrupt input data, as
    /// opposed to invalid requests.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::BadMagic { .. }
                | Error::Header(_)
                | Error::Truncated(_)
                | Error::Overlap(_)
                | Error::NanPayload(_)
                | Error::SizeMismatch { .. }
        )
    }
}
