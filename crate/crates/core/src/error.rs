use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("cannot estimate a scale from all-zero activations")]
    DegenerateScale,

    #[error("batch size {batch_size} exceeds the {total} tokens available")]
    InvalidBatchSize { batch_size: usize, total: usize },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("model set mismatch: {0}")]
    ModelSetMismatch(String),

    #[error("non-finite gradient entry")]
    NonFiniteGradient,

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("training diverged at step {0}")]
    DivergedAtStep(u64),

    #[error("sample {0} lacks a correctness label for a required model")]
    MissingLabel(String),

    #[error("critical set for task {0:?} is empty")]
    EmptyCriticalSet(String),

    #[error("feature index {index} out of range for d_sparse = {d_sparse}")]
    InvalidFeature { index: usize, d_sparse: usize },

    #[error("no near-orthogonal dictionary found after {attempts} attempts")]
    DictionaryInfeasible { attempts: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
