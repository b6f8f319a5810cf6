//! Crate-wide error type.

use std::fmt;

/// Unified error for every fallible operation in the crate.
///
/// Variants map to the kinds of failure a caller can act on: shape
/// problems, bad configuration, malformed files, and so on.
#[derive(Debug)]
pub enum Error {
    /// Tensor/array shapes do not line up; the message names the axes.
    Dimension(String),
    /// A structurally valid request that cannot be computed (e.g. a
    /// convolution whose output size is not an integer).
    Config(String),
    /// A caller-supplied value is out of range or otherwise unusable.
    Input(String),
    /// A byte stream does not follow its declared format.
    Format(String),
    /// A document failed schema validation; `pointer` is a JSON pointer
    /// to the offending element.
    Parse { pointer: String, message: String },
    /// A parsed document is internally inconsistent.
    Validation(String),
    /// The requested operation is undefined for the given object.
    Semantic(String),
    /// A budget or constraint makes the request unsatisfiable.
    Infeasible(String),
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, batch: usize },
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Input(msg) => write!(f, "invalid input: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Parse { pointer, message } => {
                write!(f, "parse error at {pointer}: {message}")
            }
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Semantic(msg) => write!(f, "semantic error: {msg}"),
            Error::Infeasible(msg) => write!(f, "infeasible request: {msg}"),
            Error::Diverged { epoch, batch } => write!(
                f,
                "training diverged (non-finite loss) at epoch {epoch}, batch {batch}"
            ),
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
