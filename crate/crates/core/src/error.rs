use std::io;

use thiserror::Error;

/// Errors produced anywhere in the codec library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("checksum mismatch: {0}")]
    Checksum(String),
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("weight digest mismatch: bitstream was produced with different model weights")]
    DigestMismatch,
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
