use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the engine, the optical model, the containers and the trainer.
#[derive(Debug)]
pub enum Error {
    /// Operands of `op` have shapes that cannot be combined.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A single operand has a shape the operation does not accept.
    Shape { op: &'static str, detail: String },
    /// A caller-side precondition was violated.
    Contract(String),
    /// A file or byte stream does not follow the expected layout.
    Format(String),
    /// A configuration key or value was rejected.
    Config(String),
    /// Training produced a non-finite loss.
    NonFinite {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    Io(std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::Shape { op, detail } => write!(f, "{op}: {detail}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Format(msg) => write!(f, "malformed input: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::NonFinite {
                step,
                last_checkpoint,
            } => match last_checkpoint {
                Some(path) => write!(
                    f,
                    "non-finite loss at step {step}; last good checkpoint: {}",
                    path.display()
                ),
                None => write!(f, "non-finite loss at step {step}; no checkpoint written yet"),
            },
            Error::Io(err) => write!(f, "io: {err}"),
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
