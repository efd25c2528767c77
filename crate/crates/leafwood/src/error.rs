use std::path::{Path, PathBuf};

/// Errors raised while reading, writing or running the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// The file structure is not what the reader expects.
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    /// A single cell could not be read.
    #[error("{}: {location}, column `{column}`: {msg}", path.display())]
    Parse {
        path: PathBuf,
        location: String,
        column: String,
        msg: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] leafwood_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}
