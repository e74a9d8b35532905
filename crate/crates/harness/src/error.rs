use std::path::PathBuf;

use hic_core::checkpoint::CheckpointError;
use hic_core::nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {message} (at byte offset {offset})")]
    Format { path: PathBuf, offset: u64, message: String },
    #[error("{path}:{line}: {message}")]
    Csv { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run {run} diverged at step {step}")]
    Diverged { run: String, step: u64 },
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("event log does not match device counters: {0}")]
    Replay(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    /// Process exit status: 2 config, 3 divergence, 4 I/O and input data,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Diverged { .. } => 3,
            HarnessError::Format { .. } | HarnessError::Csv { .. } | HarnessError::Io { .. } => 4,
            HarnessError::Checkpoint { source: CheckpointError::Mismatch(_), .. } => 2,
            HarnessError::Checkpoint { .. } => 4,
            HarnessError::Nn(NnError::Spec(_) | NnError::Config(_)) => 2,
            HarnessError::Replay(_) | HarnessError::Nn(_) => 1,
        }
    }
}
