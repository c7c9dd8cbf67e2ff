use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes or extents.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A precondition on arguments was violated.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("construction error: {0}")]
    Construction(String),

    /// Checkpoint could not be read or does not match the model.
    #[error("load error: {0}")]
    Load(String),

    #[error("missing file for case {case_id}: {}", path.display())]
    MissingFile { case_id: String, path: PathBuf },

    #[error("checksum mismatch for case {case_id}: {}", path.display())]
    Checksum { case_id: String, path: PathBuf },

    #[error("malformed record: {0}")]
    Malformed(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
