use std::path::PathBuf;

use medrec_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown codes: {}", .0.join(", "))]
    UnknownCodes(Vec<String>),
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation failures (bad input files or config) as opposed to
    /// runtime failures; the CLI maps these to different exit codes.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CoreError::Parse { .. }
                | CoreError::Invalid(_)
                | CoreError::Config(_)
                | CoreError::UnknownCodes(_)
                | CoreError::VocabularyMismatch(_)
                | CoreError::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
