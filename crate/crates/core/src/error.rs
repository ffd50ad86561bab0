use alloc::string::String;
use core::fmt;

/// Errors raised by model construction, forward passes and metric evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    Shape(String),
    /// A configuration names something that does not exist or is inconsistent.
    Config(String),
    /// Input data violates a documented precondition.
    Validation(String),
    /// An operation would materialize more memory than its guard allows.
    Resource {
        what: String,
        requested: usize,
        limit: usize,
    },
    /// Parameters could not be restored from serialized form.
    Load(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Resource {
                what,
                requested,
                limit,
            } => write!(
                f,
                "resource error: {what} needs {requested} elements, limit is {limit}"
            ),
            Error::Load(m) => write!(f, "load error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::Error::Shape(alloc::format!($($arg)*)) };
}
pub(crate) use shape_err;
