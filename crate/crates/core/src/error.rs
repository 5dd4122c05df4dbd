use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },
    #[error("class split: {0}")]
    Split(String),
    #[error("task sampling: {0}")]
    Sampling(String),
    #[error("routing contract violated: {0}")]
    Routing(String),
    #[error("diverged at iteration {iteration}, task {task}: {what} is not finite{}",
        last_checkpoint.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Divergence {
        iteration: usize,
        task: usize,
        what: &'static str,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("checkpoint {path}: {kind}")]
    Checkpoint { path: PathBuf, kind: CheckpointError },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Structured checkpoint failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not an NRML1 checkpoint)")]
    BadMagic,
    #[error("file truncated inside record {record}")]
    Truncated { record: usize },
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("tensor {name}: stored shape {stored:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor {0} missing from checkpoint")]
    Missing(String),
    #[error("tensor {0} is not part of the model")]
    Unexpected(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 1 validation, 2 divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 2,
            Error::Io { .. } | Error::Ingestion { .. } | Error::Checkpoint { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
