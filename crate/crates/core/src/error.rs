use std::path::PathBuf;

use thiserror::Error;

/// Error categories surfaced by the library and the CLI.
///
/// The CLI prints the category prefix and maps each variant to its own exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("version error: {0}")]
    Version(String),
    #[error("io error: {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable numeric code, shared by the CLI exit status and the C ABI.
    pub fn code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) => 2,
            Error::Config(_) => 3,
            Error::Format(_) => 4,
            Error::Data(_) => 5,
            Error::Version(_) => 6,
            Error::Io { .. } => 7,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidInput(format!($($arg)*)) };
}
pub(crate) use invalid;
