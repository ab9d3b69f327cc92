use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs_name} {lhs:?} vs {rhs_name} {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs_name: &'static str,
        lhs: Vec<usize>,
        rhs_name: &'static str,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: String },

    #[error("backward: output must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("unknown {what} `{name}`")]
    Unknown { what: &'static str, name: String },

    #[error("{stage}: non-finite or diverging loss at iteration {iteration}: {detail}")]
    Diverged { stage: &'static str, iteration: usize, detail: String },

    #[error("missing frame {0}")]
    MissingFrame(usize),

    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },

    #[error("not a checkpoint")]
    NotACheckpoint,

    #[error("checkpoint version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("checkpoint is malformed: {0}")]
    Corrupt(String),

    /// `line` is 1-based; 0 marks a value that did not come from a file line.
    #[error("{}", config_message(*line, msg))]
    Config { line: usize, msg: String },
}

fn config_message(line: usize, msg: &str) -> String {
    match line {
        0 => format!("config: {msg}"),
        n => format!("config line {n}: {msg}"),
    }
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io { path: path.into(), msg: err.to_string() }
    }
}
