use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("failed to encode {path}: {msg}")]
    Encode { path: PathBuf, msg: String },
    #[error("no image/label pairs found under {0}")]
    EmptyDataset(PathBuf),
    #[error("missing pair for {0}")]
    MissingPair(PathBuf),
    #[error("shape mismatch for {what}: {left:?} vs {right:?}")]
    ShapeMismatch {
        what: String,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("label id {id} in {path} exceeds the 16-bit range")]
    LabelOverflow { path: PathBuf, id: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("incompatible weights at layer `{layer}`: {msg}")]
    IncompatibleWeights { layer: String, msg: String },
    #[error("corrupt checkpoint {path}: {msg}")]
    CorruptCheckpoint { path: PathBuf, msg: String },
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("inconsistent scheme configuration: {0}")]
    Scheme(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
