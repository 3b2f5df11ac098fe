use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NumericDomain(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("sequence length {len} exceeds positional table of {max}")]
    Length { len: usize, max: usize },
    #[error("chronology violation for user {user}: expected t={expected}, got t={got}")]
    Chronology { user: usize, expected: usize, got: usize },
    #[error("window underflow: t={t} with n0={n0}")]
    WindowUnderflow { t: usize, n0: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("user {user} has {have} history vectors, needs {need}")]
    InsufficientHistory { user: usize, have: usize, need: usize },
    #[error("empty history")]
    EmptyHistory,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("empty evaluation set")]
    EmptyEval,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short name used in machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NumericDomain(_) => "numeric_domain",
            Error::Index(_) => "index",
            Error::Length { .. } => "length",
            Error::Chronology { .. } => "chronology",
            Error::WindowUnderflow { .. } => "window_underflow",
            Error::Protocol(_) => "protocol",
            Error::InsufficientHistory { .. } => "insufficient_history",
            Error::EmptyHistory => "empty_history",
            Error::Config(_) => "config",
            Error::Spec(_) => "spec",
            Error::Divergence(_) => "divergence",
            Error::EmptyEval => "empty_eval",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
