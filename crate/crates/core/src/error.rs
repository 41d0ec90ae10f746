use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-facing configuration (ranges, flags, missing inputs).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition (shapes, sizes).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate representation: pre-normalization norm {norm:e} is below 1e-12")]
    DegenerateRepresentation { norm: f64 },

    #[error("ingestion error for {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("checkpoint error for {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("I/O error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
