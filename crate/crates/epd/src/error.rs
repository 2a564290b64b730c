use std::path::{Path, PathBuf};

use epd_core::error::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but its contents are not what this version writes.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit status for each failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

impl Error {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Error {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => exit::USAGE,
            Error::Io { .. } | Error::Format { .. } => exit::DATA,
            Error::Core(e) => match e {
                CoreError::Config(_) | CoreError::Untrained { .. } | CoreError::Schedule(_) => exit::USAGE,
                CoreError::Data(_) | CoreError::Horizon(..) | CoreError::UnknownGroup { .. } => exit::DATA,
                CoreError::Shape { .. }
                | CoreError::NonScalar(_)
                | CoreError::NonFiniteGradient(_)
                | CoreError::NonFiniteLoss { .. }
                | CoreError::InvalidDistribution(_)
                | CoreError::NonFinite(_)
                | CoreError::DiffusionDiverged { .. }
                | CoreError::Diverged { .. } => exit::NUMERIC,
            },
        }
    }
}
