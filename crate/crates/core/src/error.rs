//! Crate-wide error type.

use thiserror::Error;

use crate::transcript::Speaker;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("segment \"{text}\" has {chars} characters but only {frames} frames")]
    SegmentTooDense {
        text: String,
        chars: usize,
        frames: usize,
    },

    #[error("speaker {speaker:?} segments overlap around {at_s:.3} s")]
    SameSpeakerOverlap { speaker: Speaker, at_s: f64 },

    #[error("character {0:?} is not in the token vocabulary")]
    UnknownChar(char),

    #[error("text is empty")]
    EmptyText,

    #[error("computed start time {0:.3} s is negative")]
    NegativeTime(f64),

    #[error("invalid transcript: {0}")]
    InvalidTranscript(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("every frame is masked out of the loss")]
    AllMasked,

    #[error("no prompt candidate for speaker {0:?}")]
    NoCandidate(Speaker),

    #[error("no prompt supplied for either speaker")]
    NoPrompt,

    #[error("unknown timbre id {0}")]
    UnknownTimbre(usize),

    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),

    #[error("invalid mixing weights: {0}")]
    InvalidWeights(String),

    #[error("no non-silent frames available")]
    AllSilent,

    #[error("expected a positive value: {0}")]
    NonPositive(String),

    #[error("non-finite value in {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { what: String, step: Option<u64> },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("evaluation corpus is empty")]
    EmptyEvalSet,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corpus format error: {0}")]
    CorpusFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
