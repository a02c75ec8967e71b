//! Error type shared across the engine.
//!
//! Shape and contract violations are programming errors surfaced as values so
//! callers (and tests) can assert on them; configuration errors come from user
//! input; IO errors always carry the offending path.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands disagree on shape for the named operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single operand has a shape the named operation cannot accept.
    #[error("invalid shape in {op}: got {shape:?} ({detail})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },

    /// Misuse of the autodiff tape (double backward, non-scalar root, ...).
    #[error("autodiff contract violated: {0}")]
    Contract(String),

    /// Invalid configuration value (p < 1, dropout out of range, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A character in the input is not part of the vocabulary.
    #[error("cannot encode {ch:?} at character position {position}: not in vocabulary")]
    Encoding { ch: char, position: usize },

    /// A token id is outside the vocabulary.
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    Decoding { id: u32, vocab: usize },

    /// The corpus file is unusable (empty, too small for the requested folds, ...).
    #[error("corpus error: {0}")]
    Corpus(String),

    /// A checkpoint or token-cache file is malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Run metrics are missing, duplicated, or inconsistent across folds.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// Filesystem failure, tagged with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Training produced a non-finite loss and aborted.
    #[error("training diverged at iter {iter}: {detail}")]
    Diverged { iter: usize, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
