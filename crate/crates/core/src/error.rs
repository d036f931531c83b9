use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("shape mismatch: {lhs:?} vs {rhs:?} ({context})")]
    Shape {
        lhs: (usize, usize),
        rhs: (usize, usize),
        context: &'static str,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("point ({x}, {y}, {z}) lies outside the voxel grid bounds")]
    OutOfBounds { x: f64, y: f64, z: f64 },

    #[error("empty scene: no boxes and zero background density")]
    EmptyScene,

    #[error("label {0} is not binary")]
    NonBinaryLabel(f64),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss is {value}")]
    Diverged { step: usize, value: f64 },

    #[error("correlation undefined: {0}")]
    Undefined(&'static str),

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
