use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The variants are grouped so that callers (the CLI in particular) can map
/// them onto a small, stable set of exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures specific to reading or writing checkpoint files.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (missing magic line)")]
    BadMagic,

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("malformed checkpoint header: {0}")]
    Header(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("payload size disagrees with config: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("architecture mismatch between checkpoint and config: {0}")]
    ArchitectureMismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
