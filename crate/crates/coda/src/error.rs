use std::path::{Path, PathBuf};

use coda_core::CoreError;

use crate::checkpoint::CheckpointError;
use crate::idx::IdxError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown variant `{0}` (expected one of co-da, co-da-bn, co-da-sh, vada-single, co-da-nodiv, source-only)")]
    UnknownVariant(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: malformed metrics line {line}: {reason}")]
    Metrics { path: PathBuf, line: usize, reason: String },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Core(CoreError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::UnknownVariant(_) => 5,
            Error::Io { .. } | Error::Idx { .. } | Error::Checkpoint(_) | Error::Metrics { .. } => 3,
            Error::NonFinite(_) => 4,
            Error::Core(e) => match e {
                CoreError::NonFinite { .. } | CoreError::NonFiniteGradient { .. } => 4,
                CoreError::StateShapeMismatch { .. } | CoreError::StateMissing { .. } => 3,
                _ => 2,
            },
        }
    }
}

impl From<CoreError> for Error {
    fn from(e: CoreError) -> Self {
        Error::Core(e)
    }
}
