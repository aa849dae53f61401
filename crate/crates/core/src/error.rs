//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A class named by the split is absent from an embedding file.
    #[error("class `{0}` not found in embedding file")]
    MissingClass(String),
    /// An input file does not follow its documented layout.
    #[error("format error: {0}")]
    Format(String),
    /// A vector that must be normalizable has (near-)zero norm.
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),
    /// Prompt ensembling was asked to average zero templates.
    #[error("prompt ensemble needs at least one template vector")]
    EmptyEnsemble,
    /// A scalar argument is outside its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// An index does not address a row of its container.
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
    /// Two operands disagree on dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A score row is not a probability distribution.
    #[error("invalid score vector: {0}")]
    InvalidScore(String),
    /// Scene synthesis could not satisfy its constraints.
    #[error("scene generation failed: {0}")]
    Generation(String),
    /// A prediction names a class outside the split.
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    /// An operation that needs foreground pixels received none.
    #[error("mask is empty")]
    EmptyMask,
    /// A config file, flag combination, or checkpoint/config pair is invalid.
    #[error("config error: {0}")]
    Config(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}; last good checkpoint at {checkpoint}")]
    Divergence { step: usize, checkpoint: PathBuf },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
