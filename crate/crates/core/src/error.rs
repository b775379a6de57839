use std::path::PathBuf;

use famnet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("unknown emotion label `{label}` for dataset `{dataset}`")]
    UnknownEmotion { label: String, dataset: String },

    #[error("unsupported dataset `{0}`")]
    UnsupportedDataset(String),

    #[error("manifest {path}, line {line}: {reason}")]
    Manifest {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("leave-one-subject-out needs at least two subjects, found {0}")]
    TooFewSubjects(usize),

    #[error("sequence of {len} frames is shorter than the required {needed}")]
    SequenceTooShort { len: usize, needed: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("fold `{fold}` diverged at epoch {epoch}: {detail}")]
    Diverged {
        fold: String,
        epoch: usize,
        detail: String,
    },

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
