use std::path::PathBuf;

use thiserror::Error;

/// Failure decoding a tensor file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorFileError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("truncated file")]
    Truncated,
    #[error("trailing bytes after payload")]
    TrailingBytes,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] coss_numerics::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {kind}")]
    TensorFile { path: PathBuf, kind: TensorFileError },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite loss at stage {stage}, step {step} ({source_tag})")]
    NonFiniteLoss { stage: usize, step: usize, source_tag: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
