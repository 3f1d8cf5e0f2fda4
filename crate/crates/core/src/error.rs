use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the restoration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("degenerate output shape: {0}")]
    DegenerateOutput(String),
    #[error("patch of size {size} does not fit a {height}x{width} image")]
    PatchTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("kernel size {0} is even")]
    EvenSize(usize),
    #[error("shape {shape:?} not divisible by {factor}")]
    ShapeNotDivisible { shape: Vec<usize>, factor: usize },
    #[error("corpus contains no PNG images")]
    EmptyCorpus,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("adapter rank mismatch: {0}")]
    RankMismatch(String),
    #[error("reversed interval: t={t} t'={t_prime}")]
    ReversedInterval { t: f64, t_prime: f64 },
    #[error("timestep {0} outside [0, 1]")]
    TimestepOutOfRange(f64),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("no training data")]
    EmptyData,
    #[error("image too small for the metric window: {0:?}")]
    TooSmall(Vec<usize>),
    #[error("empty image set")]
    EmptySet,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable short identifier used in machine-parsable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "MissingFile",
            Error::UnsupportedFormat(_) => "UnsupportedFormat",
            Error::Io(_) => "IoFailure",
            Error::DegenerateOutput(_) => "DegenerateOutput",
            Error::PatchTooLarge { .. } => "PatchTooLarge",
            Error::EvenSize(_) => "EvenSize",
            Error::ShapeNotDivisible { .. } => "ShapeNotDivisible",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::ShapeMismatch(..) => "ShapeMismatch",
            Error::RankMismatch(_) => "RankMismatch",
            Error::ReversedInterval { .. } => "ReversedInterval",
            Error::TimestepOutOfRange(_) => "TimestepOutOfRange",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::EmptyData => "EmptyData",
            Error::TooSmall(_) => "TooSmall",
            Error::EmptySet => "EmptySet",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::Parse { .. } => "ParseError",
            Error::Validation(_) => "ValidationError",
            Error::ChecksumMismatch => "ChecksumMismatch",
            Error::VersionUnsupported(_) => "VersionUnsupported",
            Error::MalformedCheckpoint(_) => "MalformedCheckpoint",
        }
    }
}
