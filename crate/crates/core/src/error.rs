use std::path::PathBuf;

use avsr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AvsrError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid {what}: {detail}")]
    Invalid { what: String, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {detail} (at byte offset {offset})")]
    Format { path: PathBuf, offset: u64, detail: String },
    #[error("{path}: row {row}: {detail}")]
    Manifest { path: PathBuf, row: usize, detail: String },
    #[error("training diverged in stage '{stage}', epoch {epoch}: {detail}")]
    Divergence { stage: String, epoch: usize, detail: String },
    #[error("missing {0}")]
    Missing(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl AvsrError {
    pub fn invalid(what: impl Into<String>, detail: impl Into<String>) -> Self {
        AvsrError::Invalid { what: what.into(), detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AvsrError::Io { path: path.into(), source }
    }

    /// Process exit code: 1 for validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            AvsrError::Invalid { .. }
            | AvsrError::Config(_)
            | AvsrError::Format { .. }
            | AvsrError::Manifest { .. }
            | AvsrError::Missing(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, AvsrError>;

pub(crate) fn invalid(what: impl Into<String>, detail: impl Into<String>) -> AvsrError {
    AvsrError::invalid(what, detail)
}
