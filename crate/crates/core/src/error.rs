use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("empty attention row {row}: no admissible key")]
    EmptyAttentionRow { row: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("target id {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("no included instances for the loss")]
    NoInstances,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("function is not deterministic: two forward passes disagree ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },

    #[error("FASTA parse error at line {line}: {msg}")]
    Fasta { line: usize, msg: String },

    #[error("invalid symbol {symbol:?} at position {position}")]
    InvalidSymbol { symbol: char, position: usize },

    #[error("special token {id} cannot be reverse-complemented")]
    SpecialToken { id: u8 },

    #[error("unknown corpus kind {0:?}")]
    UnknownCorpus(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u16, expected: u16 },

    #[error("{0}")]
    Invalid(String),

    #[error("{}:{line}: {msg}", path.display())]
    Line { path: PathBuf, line: usize, msg: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
