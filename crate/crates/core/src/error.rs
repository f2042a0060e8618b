use thiserror::Error;
use tsagent_autodiff::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parse error at row {row}, column {column}: {detail}")]
    Parse { row: usize, column: usize, detail: String },
    #[error("insufficient data: need {needed} rows, have {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("channel {0} has no observed values")]
    ChannelEmpty(usize),
    #[error("window is fully masked")]
    FullyMasked,
    #[error("response parse error: {0}")]
    ResponseParse(String),
    #[error("schema error: missing or invalid field `{0}`")]
    Schema(String),
    #[error("anchor confidence {0} below threshold")]
    LowConfidence(f64),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint rejected request with status {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("registry error: {0}")]
    Registry(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Broad category used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Registry(_) => ErrorKind::Config,
            Error::Transport(_) | Error::Endpoint { .. } => ErrorKind::Transport,
            Error::Parse { .. } | Error::InsufficientData { .. } | Error::ChannelEmpty(_) | Error::Io { .. } => {
                ErrorKind::Data
            }
            _ => ErrorKind::Internal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Transport,
    Internal,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
