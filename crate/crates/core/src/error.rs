use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the command line to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Config,
    Invariant,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown compass label {0:?} (expected one of N, NE, E, SE, S, SW, W, NW)")]
    UnknownDirection(String),

    #[error("missing column {column:?} in header")]
    MissingColumn { column: String },

    #[error("time column is not strictly increasing at data row {row}")]
    NonMonotonicTime { row: usize },

    #[error("irregular sampling at data row {row}: two rows fall on the same sample slot")]
    IrregularSampling { row: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("channel {channel} has {found} valid samples, at least {required} are needed")]
    InsufficientSamples {
        channel: String,
        found: usize,
        required: usize,
    },

    #[error("insufficient joint coverage: no channel pair has enough jointly valid samples")]
    InsufficientCoverage,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Malformed { what: String, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Wraps a failure with the pipeline location it happened in.
    #[error("[{module}] session {session:?}{}: {source}", channel.as_ref().map(|c| format!(" channel {c}")).unwrap_or_default())]
    Stage {
        module: &'static str,
        session: String,
        channel: Option<String>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Invariant(_) => ErrorKind::Invariant,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Input,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, module: &'static str, session: &str) -> Self {
        match self {
            // keep the innermost location
            e @ Error::Stage { .. } => e,
            e => {
                let channel = match &e {
                    Error::InsufficientSamples { channel, .. } => Some(channel.clone()),
                    _ => None,
                };
                Error::Stage {
                    module,
                    session: session.to_string(),
                    channel,
                    source: Box::new(e),
                }
            }
        }
    }
}
