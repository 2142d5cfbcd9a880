//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid token {0:?}: {1}")]
    InvalidToken(String, &'static str),

    #[error("invalid language id {0:?}: must be non-empty lowercase ascii letters")]
    InvalidLang(String),

    #[error("sentence already carries indicator {0:?}")]
    IndicatorPresent(String),

    #[error("index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("unknown indicator token {0:?}")]
    UnknownIndicator(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("zero-length target sentence in batch")]
    EmptyTarget,

    #[error("sentence length {len} exceeds max_len {max_len}")]
    Overlength { len: usize, max_len: usize },

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("checkpoint version {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checksum mismatch for {file}")]
    ChecksumMismatch { file: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("method {method} is not valid in the {scenario} scenario")]
    ScenarioMismatch { method: String, scenario: String },

    #[error("missing rank mapping for learned language {0}")]
    MissingMapping(String),

    #[error("joint training requires retained raw corpora, none available")]
    MissingRawCorpora,

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("candidate/reference count mismatch: {candidates} vs {references}")]
    CountMismatch { candidates: usize, references: usize },

    #[error("missing {split} split for task {task}")]
    MissingSplit { task: String, split: &'static str },

    #[error("invalid synthetic spec: {0}")]
    InvalidSynthSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
