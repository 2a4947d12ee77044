use alloc::string::String;
use core::fmt;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    Shape(String),
    /// An operation received a tensor of the wrong rank.
    Rank { op: &'static str, expected: usize, got: usize },
    /// NaN, infinity or a value outside an operation's domain.
    Numeric(String),
    /// Degenerate or invalid geometry.
    Geometry(String),
    /// Invalid configuration or parameter value.
    Config(String),
    /// More ground-truth elements than prediction slots.
    Capacity { queries: usize, elements: usize },
    /// A domain object violates one of its invariants.
    Validation(String),
    /// Malformed binary or textual encoding.
    Decode(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "dimension error: {msg}"),
            Error::Rank { op, expected, got } => {
                write!(f, "rank error: {op} expects rank {expected}, got rank {got}")
            }
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Geometry(msg) => write!(f, "geometry error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Capacity { queries, elements } => write!(
                f,
                "capacity error: {elements} ground-truth elements exceed {queries} queries"
            ),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Decode(msg) => write!(f, "decode error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
