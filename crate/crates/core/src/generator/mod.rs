//! Semantically conditioned LSTM generator with teacher-forced training
//! loss and beam-search decoding.

mod beam;
mod model;
mod vocab;

#[cfg(test)]
mod tests;

use thiserror::Error;

pub use beam::{DecodeOptions, Hypothesis};
pub use model::{DropoutMasks, Generator, ModelConfig, PlainState, Sequence, TapeState, Weights, INIT_RANGE};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

use crate::autodiff::AutodiffError;
use crate::corpus::{CorpusError, CorpusExample, Schema};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("sequence must hold a start token and at least one target")]
    EmptySequence,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in forward pass")]
    NonFinite,
}

/// Encodes a corpus example for training or evaluation.
pub fn encode_example(schema: &Schema, vocab: &Vocabulary, ex: &CorpusExample) -> Result<Sequence, GeneratorError> {
    Ok(Sequence {
        da: schema.encode_da(&ex.da)?,
        ids: vocab.encode(&ex.tokens),
    })
}
