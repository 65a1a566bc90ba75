use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DType { expected: &'static str, found: &'static str },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("node `{node}`: {message}")]
    Node { node: String, message: String },

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("architecture mismatch: checkpoint hash {found:#010x}, expected {expected:#010x}")]
    ArchitectureMismatch { expected: u32, found: u32 },

    #[error("missing tape: forward was run without keep_intermediates")]
    MissingTape,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn node(node: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Node { node: node.into(), message: message.into() }
    }

    /// Prefixes the message of a format error with `ctx`; other errors are
    /// turned into format errors carrying their full text.
    pub(crate) fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Format(m) => Error::Format(format!("{ctx}: {m}")),
            Error::Io { .. } => self,
            e => Error::Format(format!("{ctx}: {e}")),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 1 usage, 2 data/format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::NonFinite { .. } | Error::GradCheck(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
