use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("codebook layer {layer} is empty")]
    EmptyCodebook { layer: usize },

    #[error("no items to fit")]
    NoItems,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("level {level} order {order} is not active for this memory")]
    InactiveOrder { level: usize, order: usize },

    #[error("unknown item id `{0}`")]
    UnknownItem(String),

    #[error("prefix {0:?} is not in the catalog prefix tree")]
    PrefixNotInTree(Vec<u32>),

    #[error("catalog is empty")]
    EmptyCatalog,

    #[error("sequence length {len} exceeds the encoder maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("operation requires the {0} variant")]
    WrongVariant(&'static str),

    #[error("backward called before any forward value was recorded")]
    BackwardBeforeForward,

    #[error("contradictory ablation flags: {0}")]
    ContradictoryFlags(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("empty evaluation set")]
    EmptyEvaluation,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
