use std::cmp::Ordering;

use super::{Generator, GeneratorError, BOS, EOS, PAD};
use crate::autodiff::ParameterVector;

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam_width: usize,
    pub max_len: usize,
    pub bos: usize,
    /// Hypotheses end when this token is emitted. With `None` every
    /// hypothesis runs to `max_len`.
    pub eos: Option<usize>,
    /// Tokens never emitted.
    pub banned: Vec<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam_width: 5,
            max_len: 40,
            bos: BOS,
            eos: Some(EOS),
            banned: vec![PAD, BOS],
        }
    }
}

/// A decoded sequence. `ids` excludes the start token and includes the end
/// token when one was emitted.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub logprob: f64,
    /// `logprob / ids.len()`.
    pub score: f64,
}

/// Higher score first; equal scores fall back to lexicographic token ids.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids))
}

impl Generator {
    /// Length-normalized beam search without dropout. Returns up to
    /// `beam_width` finished hypotheses, best first.
    pub fn decode(&self, params: &ParameterVector, da: &[f64], opts: &DecodeOptions) -> Result<Vec<Hypothesis>, GeneratorError> {
        if opts.beam_width == 0 || opts.max_len == 0 {
            return Err(GeneratorError::InvalidConfig("beam width and max length must be at least 1".into()));
        }
        let v = self.vocab_size();
        let allowed: Vec<usize> = (0..v).filter(|t| !opts.banned.contains(t)).collect();
        if allowed.is_empty() {
            return Err(GeneratorError::InvalidConfig("every token is banned".into()));
        }
        let w = self.weights(params)?;
        let mut state = self.plain_initial(&[da])?;
        let mut live = vec![Hypothesis {
            ids: Vec::new(),
            logprob: 0.0,
            score: 0.0,
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        let mut inputs = vec![opts.bos];
        for len in 1..=opts.max_len {
            let (next, logp) = self.plain_step(&w, &state, &inputs)?;
            // (parent, token, logprob, score); ids are only built for survivors.
            let mut cands: Vec<(usize, usize, f64, f64)> = Vec::with_capacity(live.len() * allowed.len());
            for (b, hyp) in live.iter().enumerate() {
                for &t in &allowed {
                    let lp = hyp.logprob + logp.data()[b * v + t];
                    cands.push((b, t, lp, lp / len as f64));
                }
            }
            let order = |x: &(usize, usize, f64, f64), y: &(usize, usize, f64, f64)| {
                y.3.total_cmp(&x.3)
                    .then_with(|| live[x.0].ids.cmp(&live[y.0].ids))
                    .then_with(|| x.1.cmp(&y.1))
            };
            if cands.len() > opts.beam_width {
                cands.select_nth_unstable_by(opts.beam_width - 1, order);
                cands.truncate(opts.beam_width);
            }
            cands.sort_by(order);
            let cands: Vec<(usize, Hypothesis)> = cands
                .into_iter()
                .map(|(b, t, logprob, score)| {
                    let mut ids = Vec::with_capacity(len);
                    ids.extend_from_slice(&live[b].ids);
                    ids.push(t);
                    (b, Hypothesis { ids, logprob, score })
                })
                .collect();
            let mut parents = Vec::new();
            live.clear();
            inputs.clear();
            for (b, hyp) in cands {
                let last = *hyp.ids.last().expect("non-empty");
                if Some(last) == opts.eos || len == opts.max_len {
                    finished.push(hyp);
                } else {
                    parents.push(b);
                    inputs.push(last);
                    live.push(hyp);
                }
            }
            if live.is_empty() {
                break;
            }
            state = next.select(&parents);
        }
        finished.sort_by(rank);
        finished.truncate(opts.beam_width);
        Ok(finished)
    }

    /// Argmax decoding; ties go to the lower token id.
    pub fn greedy(&self, params: &ParameterVector, da: &[f64], opts: &DecodeOptions) -> Result<Hypothesis, GeneratorError> {
        let v = self.vocab_size();
        let w = self.weights(params)?;
        let mut state = self.plain_initial(&[da])?;
        let mut ids = Vec::new();
        let mut logprob = 0.0;
        let mut input = opts.bos;
        for _ in 0..opts.max_len.max(1) {
            let (next, logp) = self.plain_step(&w, &state, &[input])?;
            state = next;
            let best = (0..v)
                .filter(|t| !opts.banned.contains(t))
                .fold(None, |acc: Option<usize>, t| match acc {
                    Some(b) if logp.data()[b] >= logp.data()[t] => Some(b),
                    _ => Some(t),
                })
                .ok_or_else(|| GeneratorError::InvalidConfig("every token is banned".into()))?;
            logprob += logp.data()[best];
            ids.push(best);
            input = best;
            if Some(best) == opts.eos {
                break;
            }
        }
        let score = logprob / ids.len() as f64;
        Ok(Hypothesis { ids, logprob, score })
    }
}
