use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value in {term}: {detail}")]
    Numeric { term: String, detail: String },

    #[error("environment error: {0}")]
    Env(String),

    #[error("rejected transition: {0}")]
    InvalidTransition(String),

    #[error("not ready: {0}")]
    NotReady(String),

    #[error("degenerate task: reward embedding has zero norm")]
    DegenerateTask,

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn numeric(term: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            term: term.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::DegenerateTask => 1,
            Error::Numeric { .. } => 2,
            Error::MissingArtifact { .. } => 3,
            _ => 1,
        }
    }
}

pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Error {
    Error::format(path, detail)
}
