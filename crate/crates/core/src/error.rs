use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor is detached from this graph")]
    Detached,

    #[error("empty sequence")]
    EmptySequence,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("record {index}: {msg}")]
    InvalidRecord { index: usize, msg: String },

    #[error("insufficient pool: {available} training events available, {required} required")]
    InsufficientPool { available: usize, required: usize },

    #[error("unknown sequence id `{0}`")]
    UnknownSequence(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("{0}")]
    MissingMarkers(String),

    #[error("no valid prediction targets in batch")]
    NoTargets,

    #[error("empty mask: no real events in batch")]
    EmptyMask,

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Diverged {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty test set")]
    EmptyTestSet,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::Parse { .. }
                | Error::InvalidRecord { .. }
                | Error::InsufficientPool { .. }
                | Error::UnknownSequence(_)
                | Error::InvalidSplit(_)
                | Error::Checkpoint(_)
                | Error::Json(_)
        )
    }
}
