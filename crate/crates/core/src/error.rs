//! Error taxonomy shared by every module.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Static wiring is wrong: shape mismatch, invalid config field, width
    /// disagreement between modules.
    Config(String),
    /// Input is structurally valid but outside the operation's domain
    /// (zero vector to normalize, fewer points than requested samples).
    DegenerateInput(String),
    /// Caller misused an API contract (e.g. backward on a non-scalar).
    Usage(String),
    /// A well-formed request referenced data that does not exist
    /// (unknown token id, missing anchor row).
    Input(String),
    /// A byte stream failed to parse; `offset` is where parsing stopped.
    Format { offset: usize, msg: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::DegenerateInput(m) => write!(f, "degenerate input: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Format { offset, msg } => write!(f, "format error at byte {offset}: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(alloc::format!($($arg)*))
    };
}
macro_rules! degenerate_err {
    ($($arg:tt)*) => {
        $crate::error::Error::DegenerateInput(alloc::format!($($arg)*))
    };
}
macro_rules! input_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Input(alloc::format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use degenerate_err;
pub(crate) use input_err;
