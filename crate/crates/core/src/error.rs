use std::path::PathBuf;

/// Errors produced by the library.
///
/// Variants are grouped so callers can map them onto coarse exit categories:
/// `InvalidArg` for caller mistakes, `Io`/`Parse`/`Data` for problems with
/// inputs, `Numerical` for factorization or likelihood blow-ups.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn invalid_arg(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
