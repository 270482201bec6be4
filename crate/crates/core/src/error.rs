use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("event {index} at ({x}, {y}) is outside the {width}x{height} grid")]
    OutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        width: u16,
        height: u16,
    },

    #[error("timestamp out of window: event {index} has t = {t}, window is [{t_start}, {t_end}]")]
    TimestampOutOfWindow {
        index: usize,
        t: u64,
        t_start: u64,
        t_end: u64,
    },

    #[error("unsorted events: event {index} breaks canonical order")]
    Unsorted { index: usize },

    #[error("invalid polarity {0}, expected -1 or +1")]
    InvalidPolarity(i64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
