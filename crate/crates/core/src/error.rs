use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {kind}")]
    Parse { path: PathBuf, kind: ParseErrorKind },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite gradient on client {client}")]
    NonFiniteGradient { client: usize },

    #[error("degenerate variance for client {client}: {variance:e}")]
    DegenerateVariance { client: usize, variance: f64 },

    #[error("no selectable client: {0}")]
    Selection(String),

    #[error("balance QP infeasible after {iterations} iterations (residual {residual:e})")]
    Infeasible { iterations: usize, residual: f64 },

    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    BadMagic { expected: u32, found: u32 },
    Truncated { expected: usize, found: usize },
    CountMismatch { images: usize, labels: usize },
    Malformed(String),
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::BadMagic { expected, found } => {
                write!(f, "bad magic number {found:#010x} (expected {expected:#010x})")
            }
            ParseErrorKind::Truncated { expected, found } => {
                write!(f, "truncated file: expected {expected} bytes, found {found}")
            }
            ParseErrorKind::CountMismatch { images, labels } => {
                write!(f, "count mismatch: {images} images but {labels} labels")
            }
            ParseErrorKind::Malformed(msg) => f.write_str(msg),
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
