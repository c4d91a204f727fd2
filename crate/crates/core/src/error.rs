use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("model has not been trained")]
    Untrained,

    #[error("pattern `{0}` matches no parameter group")]
    PatternNoMatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown insertion point `{0}`")]
    UnknownInsertionPoint(String),

    #[error("unsupported operation for backend `{backend}`: {what}")]
    Unsupported { backend: String, what: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing difficulty score for sample `{0}`")]
    MissingScore(String),

    #[error("project sets differ: {0}")]
    ProjectMismatch(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::DuplicateId(_) => "duplicate_id",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EmptyData(_) => "empty_data",
            Error::Untrained => "untrained",
            Error::PatternNoMatch(_) => "pattern_no_match",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::UnknownInsertionPoint(_) => "unknown_insertion_point",
            Error::Unsupported { .. } => "unsupported",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingScore(_) => "missing_score",
            Error::ProjectMismatch(_) => "project_mismatch",
            Error::UnknownMethod(_) => "unknown_method",
            Error::Config(_) => "config",
            Error::Json(_) => "json",
            Error::Tensor(_) => "tensor",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
