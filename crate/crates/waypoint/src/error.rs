use std::path::PathBuf;

use thiserror::Error;

/// Everything the pipeline can fail with, grouped by exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input {}: {reason}", path.display())]
    MissingInput { path: PathBuf, reason: String },
    #[error("refusing to overwrite {} (pass --force)", .0.display())]
    WouldOverwrite(PathBuf),
    #[error("checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },
    #[error("io error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] waypoint_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput { path, reason: "not found".into() }
            } else {
                Error::Io { path, source }
            }
        }
    }

    /// Process exit code: 2 config, 3 missing input, 4 numerical failure,
    /// 5 refused overwrite, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use waypoint_core::Error as E;
        match self {
            Error::Config(_) => 2,
            Error::MissingInput { .. } => 3,
            Error::WouldOverwrite(_) => 5,
            Error::Core(E::NonFinite { .. }) => 4,
            Error::Core(E::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}
