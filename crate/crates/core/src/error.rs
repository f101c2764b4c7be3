use thiserror::Error;

use crate::train::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; reset gradients first")]
    DoubleBackward,

    #[error("nll: no contributing positions (all targets are padding)")]
    NoContributingPositions,

    #[error("index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("character {ch:?} at position {position} is not in the alphabet")]
    OutOfAlphabet { ch: char, position: usize },

    #[error("alphabet: {0}")]
    Alphabet(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("insufficient data: need {needed} pairs, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("prediction sets differ: {0}")]
    Mismatch(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iteration}: non-finite loss")]
    Diverged {
        iteration: u64,
        checkpoint: Box<Checkpoint>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
