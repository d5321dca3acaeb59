use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("unknown instrument `{name}`; valid names: {}", valid.join(", "))]
    UnknownInstrument { name: String, valid: Vec<String> },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures reading or writing a model checkpoint.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint stores {found} tensors but this build expects {expected}")]
    DType { found: &'static str, expected: &'static str },
    #[error("unknown tensor `{0}` in checkpoint")]
    UnknownTensor(String),
    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Failures reading or writing WAV files.
#[derive(Debug, Error)]
pub enum WavError {
    #[error("malformed WAV header: {0}")]
    Header(String),
    #[error("unsupported WAV encoding: {0}")]
    Unsupported(String),
    #[error("WAV data is truncated")]
    Truncated,
}
