// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // corpus
    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("subset of size {requested} requested from a corpus of {available}")]
    SubsetTooLarge { requested: usize, available: usize },

    // tokenizer / spans
    #[error("unknown token id {0}")]
    UnknownTokenId(u32),
    #[error("span {start}..{end} out of range for length {len}")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("invalid merge table: {0}")]
    InvalidMerges(String),

    // prompting
    #[error("prompt is already emphasized")]
    AlreadyEmphasized,
    #[error("emphasis target must not be None")]
    NoEmphasisTarget,
    #[error("prompt has no {0} segment")]
    SpanMissing(&'static str),
    #[error("invalid marker pair: {0}")]
    InvalidMarker(String),

    // transformer
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("weight file format error: {0}")]
    Format(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("need at least 2 tokens to score, got {0}")]
    TooShort(usize),

    // steering / profiling
    #[error("invalid steering config: {0}")]
    InvalidSteering(String),
    #[error("head ({layer},{head}) out of range for {n_layers}x{n_heads} model")]
    HeadOutOfRange {
        layer: usize,
        head: usize,
        n_layers: usize,
        n_heads: usize,
    },
    #[error("attention steering is undefined for the question+context target")]
    InvalidTarget,
    #[error("k={k} outside 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("k grid is empty")]
    EmptyGrid,
    #[error("inconsistent score maps: {0}")]
    InconsistentScores(String),

    // metrics / harness
    #[error("log-probability {0} is not finite and <= 0")]
    InvalidLogProb(f64),
    #[error("invalid cell combination: {0}")]
    InvalidCombination(String),
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("config error: {0}")]
    ConfigValue(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration problems map to exit code 1, everything else to 2.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::ConfigValue(_) | Error::InvalidCombination(_)
        )
    }
}
