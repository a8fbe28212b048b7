use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] svrnn_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(svrnn_core::Error::Diverged { .. }) => "diverged",
            Error::Core(svrnn_core::Error::InvalidSpec(_)) => "invalid-spec",
            Error::Core(svrnn_core::Error::InvalidData(_)) => "invalid-data",
            Error::Core(_) => "computation",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Usage(_) => "usage",
        }
    }
}
