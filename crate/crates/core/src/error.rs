use std::io;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("event {index} at ({x}, {y}) lies outside the {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: i64,
        y: i64,
        width: u16,
        height: u16,
    },

    #[error("event {index} has invalid polarity {value}")]
    InvalidPolarity { index: usize, value: i64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in row {row}")]
    NonFinite { row: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing embedding for id {0:?}")]
    MissingEmbedding(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(
        "no pseudo-labels accepted ({candidates} candidates: {inconsistent} inconsistent, {low_confidence} below threshold)"
    )]
    NoPseudoLabels {
        candidates: usize,
        inconsistent: usize,
        low_confidence: usize,
    },

    #[error("png encoding failed: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
