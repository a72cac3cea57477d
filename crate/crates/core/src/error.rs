use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand extents are incompatible.
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An index argument is outside `0..bound`.
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// An operation produced NaN or an infinity.
    NonFinite { op: &'static str },
    /// `backward` needs a single-element loss.
    NotScalar { shape: Vec<usize> },
    /// `backward` was already run on this tape.
    TapeConsumed,
    /// A parameter handle does not belong to the store attached to the tape.
    UnknownParam { index: usize },
    /// An invalid model, training or dataset configuration.
    Config(String),
    /// A label outside the task's range.
    Label(String),
    /// Malformed or inconsistent input data.
    Data(String),
    /// Training produced a non-finite loss.
    Divergence { epoch: usize, step: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::Index { op, index, bound } => {
                write!(f, "{op}: index {index} out of range for extent {bound}")
            }
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::NotScalar { shape } => {
                write!(f, "backward: loss must hold a single value, got shape {shape:?}")
            }
            Error::TapeConsumed => {
                write!(f, "backward: tape already consumed; run a new forward pass")
            }
            Error::UnknownParam { index } => write!(f, "unknown parameter handle {index}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Label(msg) => write!(f, "label error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Divergence { epoch, step } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}, step {step}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
