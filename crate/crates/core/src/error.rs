use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Caller-supplied arguments outside their domain.
    #[error("input error: {0}")]
    Input(String),

    /// Malformed data content (labels out of range, corrupt payloads).
    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("non-finite loss at epoch {epoch}, iteration {iter}; diagnostics written to {dump}")]
    NonFinite {
        epoch: usize,
        iter: usize,
        dump: PathBuf,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
