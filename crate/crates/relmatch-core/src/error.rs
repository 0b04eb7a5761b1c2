//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op} expects {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward already ran on this tape; record a fresh tape instead")]
    BackwardAlreadyRun,

    #[error("slice {start}..{} out of bounds for {len} rows", start + count)]
    SliceOutOfBounds {
        start: usize,
        count: usize,
        len: usize,
    },

    #[error("row index {index} out of bounds for {rows} rows")]
    RowOutOfBounds { index: usize, rows: usize },

    #[error("caption is empty after cleaning: {caption:?}")]
    EmptyCaption { caption: String },

    #[error("token index {index} out of vocabulary range {size}")]
    TokenOutOfRange { index: usize, size: usize },

    #[error("vocabulary is malformed: {reason}")]
    BadVocabulary { reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("feature file parse error at byte {offset}: {reason}")]
    FeatureParse { offset: u64, reason: String },

    #[error("caption batch must contain at least 2 pairs, got {got}")]
    BatchTooSmall { got: usize },

    #[error("caption must start with <bos> and end with <eos> (length >= 2)")]
    CaptionTooShort,

    #[error("recall cutoff {k} exceeds candidate count {candidates}")]
    RecallCutoff { k: usize, candidates: usize },

    #[error("{count} images cannot be split into {folds} equal folds")]
    UnevenFolds { count: usize, folds: usize },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("missing features for image {image_id}")]
    MissingFeatures { image_id: u64 },

    #[error("checkpoint error: {reason}")]
    Checkpoint { reason: String },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("predicate list is malformed: {reason}")]
    BadPredicateList { reason: String },

    #[error("{path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::IoAt { path, source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
