use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"DPT1\" followed by four zero bytes")]
    BadMagic,

    #[error("payload mismatch: header declares {expected} values, file holds {found} bytes of payload")]
    PayloadMismatch { expected: usize, found: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid dims {0:?}: every extent must be >= 1 and rank must be 1..=4")]
    InvalidDims(Vec<usize>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {labels} labels")]
    LabelOutOfRange { label: usize, labels: usize },

    #[error("integer overflow while evaluating {0}")]
    Overflow(&'static str),

    #[error("training diverged in stage {stage} at iteration {iteration}: loss = {loss}")]
    Divergence {
        stage: String,
        iteration: usize,
        loss: f64,
    },

    #[error("{0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the caller's files or arguments rather
    /// than by the computation itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::BadMagic
                | Error::PayloadMismatch { .. }
                | Error::NonFinite { .. }
                | Error::InvalidDims(_)
                | Error::Parse(_)
        )
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
