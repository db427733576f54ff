use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, lengths, frozen state, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A computation produced NaN or an infinity.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A file was written by an unknown format version or has a malformed header.
    #[error("format error: {0}")]
    Format(String),
    /// A file failed its integrity check or is truncated.
    #[error("corruption: {0}")]
    Corruption(String),
    /// A segment plan that cannot produce a stitching dataset.
    #[error("generation error: {0}")]
    Generation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::contract!($($arg)*));
        }
    };
}

pub(crate) use contract;
pub(crate) use ensure;
