use std::io;
use std::path::PathBuf;

use svaclr_core::{Error, FileKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Error,
    },
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    /// 2 config, 3 I/O or dataset file, 4 numeric abort, 5 checkpoint file.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::File { source, .. } | CliError::Core(source) => match source {
                Error::InvalidArgument(_) => 2,
                Error::Io(_) => 3,
                Error::Format {
                    kind: FileKind::Dataset,
                    ..
                } => 3,
                Error::Format {
                    kind: FileKind::Checkpoint,
                    ..
                } => 5,
                Error::NonFiniteLoss { .. } => 4,
                _ => 1,
            },
            CliError::CheckFailed(_) => 1,
        }
    }
}
