use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("event {index} has timestamp {t} before previous timestamp {prev}")]
    Ordering { index: usize, prev: u64, t: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("required tensor `{0}` is missing")]
    MissingTensor(String),

    #[error("frame sequencing error: expected frame {expected}, got {got}")]
    Sequencing { expected: u64, got: u64 },

    #[error("non-finite values produced in block `{block}`")]
    Numeric { block: String },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("rank deficient input: {0}")]
    Rank(String),

    #[error("association failed: {0}")]
    Association(String),

    #[error("frame {frame}: {source}")]
    Frame {
        frame: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_frame(self, frame: u64) -> Self {
        Error::Frame {
            frame,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad input or configuration, as opposed to
    /// faults raised while computing.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Numeric { .. } | Error::Solver(_) => false,
            Error::Frame { source, .. } => source.is_input_error(),
            _ => true,
        }
    }
}
