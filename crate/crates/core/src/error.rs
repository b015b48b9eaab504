use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("node `{node}`: {message}")]
    Node { node: String, message: String },

    #[error("non-finite value produced at node `{0}`")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invariant breach: {0}")]
    Invariant(String),

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: u64, message: String },

    #[error("{path}: bad magic, not a checkpoint file")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported checkpoint version {found}")]
    UnsupportedVersion { path: PathBuf, found: u32 },

    #[error("{path}: checksum mismatch ({reason})")]
    Checksum { path: PathBuf, reason: String },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn node(node: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Node { node: node.into(), message: message.into() }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Invariant(_) => 4,
            _ => 3,
        }
    }
}
