//! Error type shared across the crate.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Incompatible shapes or other contract violations at an op boundary.
    Shape { op: &'static str, detail: String },
    /// An operation produced NaN or Inf.
    NonFinite { op: &'static str },
    /// Invalid argument (out-of-range timestep, empty class set, ...).
    Invalid { what: String },
    /// A gradient was required but not populated.
    MissingGrad { name: String },
    /// Training diverged or failed; carries diagnostics.
    Training { detail: String },
    /// Checkpoint file problems (wrong magic/version, checksum mismatch).
    Checkpoint { detail: String, offset: Option<u64> },
    /// Config file problems (unknown key, bad value).
    Config { line: usize, detail: String },
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::Invalid { what } => write!(f, "invalid argument: {what}"),
            Error::MissingGrad { name } => write!(f, "missing gradient for {name}"),
            Error::Training { detail } => write!(f, "training failure: {detail}"),
            Error::Checkpoint { detail, offset } => match offset {
                Some(o) => write!(f, "checkpoint error at byte {o}: {detail}"),
                None => write!(f, "checkpoint error: {detail}"),
            },
            Error::Config { line, detail } => write!(f, "config error (line {line}): {detail}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Exit code the CLI maps this error to: 2 for runtime errors,
    /// 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Training { .. } => 3,
            _ => 2,
        }
    }
}
