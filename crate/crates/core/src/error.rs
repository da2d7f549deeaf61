use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value outside the mathematical domain of an operation (e.g. log of a non-positive).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("missing view: {0}")]
    MissingView(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::MissingView(_) => "missing-view",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFiniteLoss { .. } => "nan-loss",
            Error::Io { .. } => "io",
        }
    }
}
