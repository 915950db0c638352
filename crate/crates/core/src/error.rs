use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("prompt parse error on line {line}: {reason}")]
    PromptParse { line: usize, reason: String },

    #[error("model is untrained: {0}")]
    Untrained(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("sequence of {len} tokens exceeds the backend limit of {max}")]
    TooLong { len: usize, max: usize },

    #[error("generation produced an empty continuation")]
    EmptyGeneration,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("backend `{0}` is not available in this build; only the tiny backend can be executed")]
    BackendUnavailable(String),

    #[error("stage `{stage}` requires `{missing}` to complete first (run `lirex {missing}`)")]
    MissingUpstream { stage: String, missing: String },

    #[error("[{stage}] {message}")]
    Stage { stage: String, message: String },

    #[error("[{label}] {source}")]
    ForLabel {
        label: crate::label::Label,
        source: Box<Error>,
    },

    #[error("label `{0}` is not one of entailment, neutral, contradiction")]
    UnknownLabel(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
