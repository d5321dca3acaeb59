use std::path::PathBuf;

use thiserror::Error;

/// Exit status contract.
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] lasaft::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use lasaft::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(e) => match e {
                E::Config(_) | E::Shape(_) | E::Validation(_) | E::UnknownInstrument { .. } => EXIT_USAGE,
                E::NonFinite { .. } => EXIT_NUMERIC,
                E::Checkpoint(_) | E::Wav(_) | E::Io { .. } => EXIT_IO,
            },
        }
    }
}
