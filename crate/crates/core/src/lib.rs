//! Character-level encoder-decoder text normalization.
//!
//! The model reads a sentence as a one-hot character matrix, encodes it with
//! one of four interchangeable encoders (LSTM, FCNN, FE, or the bidirectional
//! causal dilated-convolution CFE), and decodes the spoken form one character
//! at a time with an LSTM whose attention passes the `d` most attended code
//! columns (the context matrix) rather than a single weighted average.
//!
//! Everything below the model is implemented here: a small tensor engine
//! with reverse-mode differentiation, the dataset pipeline, training with
//! checkpoints, metrics, a paired approximate randomization test and an
//! error classifier.

pub mod alphabet;
pub mod attention;
pub mod autograd;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod toy;
pub mod train;

pub use alphabet::Alphabet;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
