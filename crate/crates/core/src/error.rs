use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported operation in graph: {0}")]
    Unsupported(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("unknown failure mode: {0}")]
    UnknownFailureMode(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used for machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Precondition(_) => "precondition",
            Error::Contract(_) => "contract",
            Error::Shape(_) => "shape",
            Error::Unsupported(_) => "unsupported",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Empty(_) => "empty",
            Error::UnknownFailureMode(_) => "failure_mode",
            Error::Numerical(_) => "numerical",
            Error::MissingCheckpoint(_) => "missing_checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
