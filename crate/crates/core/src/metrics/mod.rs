//! BLEU-4, slot error rate and training-curve reports.

mod bleu;
mod report;
mod slot;


use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::bleu4;
pub use report::{Phase, ReportRow, TrainRunReport, CSV_HEADER};
pub use slot::{slot_error_rate, SlotCounts};

use crate::autodiff::ParameterVector;
use crate::corpus::CorpusExample;
use crate::generator::{DecodeOptions, Generator, GeneratorError, Vocabulary};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("report row ({phase:?}, {step}) does not follow ({last_phase:?}, {last_step})")]
    OutOfOrder {
        phase: Phase,
        step: usize,
        last_phase: Phase,
        last_step: usize,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub bleu4: f64,
    /// Micro-averaged: summed counts divided once.
    pub err: f64,
    pub counts: SlotCounts,
    pub n: usize,
}

/// Scores delexicalized outputs against their examples.
pub fn score_outputs(outputs: &[Vec<String>], examples: &[&CorpusExample]) -> Result<EvalResult, MetricsError> {
    let refs: Vec<&Vec<String>> = examples.iter().map(|e| &e.tokens).collect();
    let refs: Vec<Vec<&str>> = refs.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
    let bleu = bleu4(outputs, &refs)?;
    let mut counts = SlotCounts::default();
    for (out, ex) in outputs.iter().zip(examples) {
        counts.add(slot_error_rate(out, &ex.da));
    }
    Ok(EvalResult {
        bleu4: bleu,
        err: counts.rate(),
        counts,
        n: outputs.len(),
    })
}

/// Top-1 beam output for each example, as delexicalized tokens.
pub fn generate_all(
    generator: &Generator,
    params: &ParameterVector,
    vocab: &Vocabulary,
    das: &[Vec<f64>],
    opts: &DecodeOptions,
) -> Result<Vec<Vec<String>>, MetricsError> {
    das.iter()
        .map(|da| {
            let best = generator.decode(params, da, opts)?;
            Ok(best.first().map(|h| vocab.decode(&h.ids)).unwrap_or_default())
        })
        .collect()
}

/// Decodes every example and aggregates corpus BLEU-4 and micro ERR.
pub fn evaluate(
    generator: &Generator,
    params: &ParameterVector,
    vocab: &Vocabulary,
    examples: &[&CorpusExample],
    das: &[Vec<f64>],
    opts: &DecodeOptions,
) -> Result<EvalResult, MetricsError> {
    if examples.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let outputs = generate_all(generator, params, vocab, das, opts)?;
    score_outputs(&outputs, examples)
}
