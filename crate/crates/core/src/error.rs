use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("not a probability vector: {0}")]
    InvalidProbVec(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid domain spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),
    #[error("class {class} has {available} samples, needs at least {required}")]
    InsufficientClass {
        class: usize,
        available: usize,
        required: usize,
    },
    #[error("class {0} has no labeled target anchors")]
    MissingAnchors(usize),
    #[error("checksum mismatch in {path}: manifest says {expected}, file hashes to {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed data in {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad failure category, used by the command line front end for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidSpec(_) => ErrorKind::Config,
            Error::InsufficientClass { .. }
            | Error::MissingAnchors(_)
            | Error::Checksum { .. }
            | Error::Version { .. }
            | Error::Malformed { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_) => ErrorKind::Data,
            _ => ErrorKind::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
