use std::fmt;
use std::path::{Path, PathBuf};

/// Failures of the command-line pipelines, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration, manifest or arguments (exit code 1).
    #[error("{0}")]
    Config(String),
    /// Training divergence or a failed check (exit code 2).
    #[error("{0}")]
    Runtime(String),
    /// Unreadable or unwritable files (exit code 3).
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// A file that exists but does not decode (exit code 3).
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] ccgan_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, msg: impl fmt::Display) -> Self {
        Error::Format { path: path.as_ref().to_path_buf(), msg: msg.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Core(ccgan_core::Error::Config(_) | ccgan_core::Error::Contract(_)) => 1,
            Error::Runtime(_) | Error::Core(ccgan_core::Error::NonFinite(_)) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
        }
    }
}

/// Attaches a path to `std::io` results.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl AsRef<Path>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl AsRef<Path>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
