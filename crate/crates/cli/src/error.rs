use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {message}", path.display())]
    Decode { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// Process exit status: 2 I/O, 3 config, 4 artifact mismatch, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Io { .. } | Self::Decode { .. } => 2,
            Self::Config(_) => 3,
            Self::Mismatch(_) => 4,
            Self::Failed(_) => 1,
        }
    }

    pub fn missing(path: &Path) -> Self {
        Self::Mismatch(format!("missing {}", path.display()))
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Attaches a path to I/O errors.
pub trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| CliError::Io { path: path.to_path_buf(), source })
    }
}
