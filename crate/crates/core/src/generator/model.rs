use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GeneratorError;
use crate::autodiff::{gemm, log_softmax_rows, sigmoid, Layout, NumericArray, ParamNodes, ParameterVector, Tape, Var};

/// Initial weights are drawn from `uniform(-INIT_RANGE, INIT_RANGE)`.
pub const INIT_RANGE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
    /// Dropout rate on token embeddings and on the hidden-to-logits path.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            embed: 50,
            dropout: 0.25,
        }
    }
}

/// Encoded training pair: DA vector and `[BOS, ..., EOS]` token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub da: Vec<f64>,
    pub ids: Vec<usize>,
}

/// Inverted-dropout masks for one batch, one `[batch, dim]` array per step.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    pub embed: Vec<NumericArray>,
    pub hidden: Vec<NumericArray>,
}

impl DropoutMasks {
    /// `None` when `rate` is zero.
    pub fn sample<R: Rng>(rng: &mut R, batch: usize, steps: usize, embed: usize, hidden: usize, rate: f64) -> Option<Self> {
        if rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - rate;
        let mut draw = |dim: usize| -> NumericArray {
            let data = (0..batch * dim)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            NumericArray::matrix(batch, dim, data).expect("sized")
        };
        let embed_masks = (0..steps).map(|_| draw(embed)).collect();
        let hidden_masks = (0..steps).map(|_| draw(hidden)).collect();
        Some(Self {
            embed: embed_masks,
            hidden: hidden_masks,
        })
    }
}

/// Recurrent state on a tape; every field is `[batch, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct TapeState {
    pub h: Var,
    pub c: Var,
    pub da: Var,
}

/// Recurrent state outside a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainState {
    pub h: NumericArray,
    pub c: NumericArray,
    pub da: NumericArray,
}

impl PlainState {
    pub fn batch(&self) -> usize {
        self.h.shape()[0]
    }

    /// Rows `ids` of this state, in that order.
    pub fn select(&self, ids: &[usize]) -> Self {
        let pick = |a: &NumericArray| {
            let cols = a.shape()[1];
            let mut out = Vec::with_capacity(ids.len() * cols);
            for &i in ids {
                out.extend_from_slice(&a.data()[i * cols..(i + 1) * cols]);
            }
            NumericArray::matrix(ids.len(), cols, out).expect("sized")
        };
        Self {
            h: pick(&self.h),
            c: pick(&self.c),
            da: pick(&self.da),
        }
    }
}

/// Dense copies of every weight, for tape-free evaluation.
#[derive(Clone, Debug)]
pub struct Weights {
    embed: NumericArray,
    w_x: NumericArray,
    w_h: NumericArray,
    b_gates: NumericArray,
    w_rx: NumericArray,
    w_rh: NumericArray,
    b_r: NumericArray,
    w_d: NumericArray,
    w_out: NumericArray,
    b_out: NumericArray,
}

/// Single-layer semantically conditioned LSTM.
///
/// Per step, with `x` the embedded input token and `d` the DA vector:
///
/// ```text
/// i, f, o = sigmoid(x W_x + h W_h + b)    ĉ = tanh(...)
/// r  = sigmoid(x W_rx + h W_rh + b_r)
/// d' = r ⊙ d
/// c' = f ⊙ c + i ⊙ ĉ + tanh(d' W_d)
/// h' = o ⊙ tanh(c')
/// logits = h' W_out + b_out
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: ModelConfig,
    vocab_size: usize,
    da_dim: usize,
    layout: Arc<Layout>,
}

const SEGMENTS: [&str; 10] = ["embed", "w_x", "w_h", "b_gates", "w_rx", "w_rh", "b_r", "w_d", "w_out", "b_out"];

fn add_rows(a: &mut NumericArray, row: &NumericArray) {
    let n = row.len();
    for chunk in a.data_mut().chunks_mut(n) {
        for (x, b) in chunk.iter_mut().zip(row.data()) {
            *x += b;
        }
    }
}

impl Generator {
    pub fn new(vocab_size: usize, da_dim: usize, config: ModelConfig) -> Result<Self, GeneratorError> {
        if vocab_size == 0 || da_dim == 0 || config.hidden == 0 || config.embed == 0 {
            return Err(GeneratorError::InvalidConfig("vocabulary, DA, hidden and embedding sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(GeneratorError::InvalidConfig(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        let (v, d, h, e) = (vocab_size, da_dim, config.hidden, config.embed);
        let shapes = [
            vec![v, e],
            vec![e, 4 * h],
            vec![h, 4 * h],
            vec![4 * h],
            vec![e, d],
            vec![h, d],
            vec![d],
            vec![d, h],
            vec![h, v],
            vec![v],
        ];
        let layout = Arc::new(Layout::new(SEGMENTS.iter().copied().zip(shapes)));
        Ok(Self {
            config,
            vocab_size,
            da_dim,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn da_dim(&self) -> usize {
        self.da_dim
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..self.layout.len()).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
        ParameterVector::from_vec(self.layout.clone(), data).expect("sized")
    }

    fn check_params(&self, params: &ParameterVector) -> Result<(), GeneratorError> {
        if !params.same_layout(&self.layout) {
            return Err(GeneratorError::Autodiff(crate::autodiff::AutodiffError::LayoutMismatch));
        }
        Ok(())
    }

    pub fn check_sequence(&self, seq: &Sequence) -> Result<(), GeneratorError> {
        if seq.da.len() != self.da_dim {
            return Err(GeneratorError::Dimension(format!("DA vector has {} entries, expected {}", seq.da.len(), self.da_dim)));
        }
        if seq.ids.len() < 2 {
            return Err(GeneratorError::EmptySequence);
        }
        self.check_ids(&seq.ids)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), GeneratorError> {
        match ids.iter().find(|&&i| i >= self.vocab_size) {
            Some(&id) => Err(GeneratorError::TokenOutOfRange { id, vocab: self.vocab_size }),
            None => Ok(()),
        }
    }

    fn da_matrix(&self, das: &[&[f64]]) -> Result<NumericArray, GeneratorError> {
        let mut data = Vec::with_capacity(das.len() * self.da_dim);
        for d in das {
            if d.len() != self.da_dim {
                return Err(GeneratorError::Dimension(format!("DA vector has {} entries, expected {}", d.len(), self.da_dim)));
            }
            data.extend_from_slice(d);
        }
        Ok(NumericArray::matrix(das.len(), self.da_dim, data)?)
    }

    pub fn initial_state(&self, tape: &mut Tape, das: &[&[f64]]) -> Result<TapeState, GeneratorError> {
        let zeros = NumericArray::zeros(&[das.len(), self.config.hidden]);
        Ok(TapeState {
            h: tape.constant(zeros.clone())?,
            c: tape.constant(zeros)?,
            da: tape.constant(self.da_matrix(das)?)?,
        })
    }

    /// One recurrent step for a batch of input tokens. Masks, when given,
    /// multiply the embedded input and the hidden state fed to the output
    /// layer.
    pub fn step(
        &self,
        tape: &mut Tape,
        p: &ParamNodes,
        state: TapeState,
        ids: &[usize],
        embed_mask: Option<&NumericArray>,
        hidden_mask: Option<&NumericArray>,
    ) -> Result<(TapeState, Var), GeneratorError> {
        self.check_ids(ids)?;
        let w = |name: &str| p.get(name).expect("generator segment");
        let h = self.config.hidden;
        let mut x = tape.gather_rows(w("embed"), ids)?;
        if let Some(m) = embed_mask {
            x = tape.mul_const(x, m.clone())?;
        }
        let xg = tape.matmul(x, w("w_x"))?;
        let hg = tape.matmul(state.h, w("w_h"))?;
        let pre = tape.add(xg, hg)?;
        let pre = tape.add_row(pre, w("b_gates"))?;
        let gate = |tape: &mut Tape, k: usize| tape.slice_cols(pre, k * h, h);
        let i = gate(tape, 0)?;
        let i = tape.sigmoid(i)?;
        let f = gate(tape, 1)?;
        let f = tape.sigmoid(f)?;
        let o = gate(tape, 2)?;
        let o = tape.sigmoid(o)?;
        let g = gate(tape, 3)?;
        let g = tape.tanh(g)?;

        let rx = tape.matmul(x, w("w_rx"))?;
        let rh = tape.matmul(state.h, w("w_rh"))?;
        let r = tape.add(rx, rh)?;
        let r = tape.add_row(r, w("b_r"))?;
        let r = tape.sigmoid(r)?;
        let da = tape.mul(r, state.da)?;

        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let inj = tape.matmul(da, w("w_d"))?;
        let inj = tape.tanh(inj)?;
        let c = tape.add(fc, ig)?;
        let c = tape.add(c, inj)?;
        let tc = tape.tanh(c)?;
        let hn = tape.mul(o, tc)?;

        let mut out = hn;
        if let Some(m) = hidden_mask {
            out = tape.mul_const(out, m.clone())?;
        }
        let logits = tape.matmul(out, w("w_out"))?;
        let logits = tape.add_row(logits, w("b_out"))?;
        Ok((TapeState { h: hn, c, da }, logits))
    }

    /// Mean teacher-forced sequence NLL over `batch`.
    pub fn batch_nll(
        &self,
        tape: &mut Tape,
        p: &ParamNodes,
        batch: &[&Sequence],
        masks: Option<&DropoutMasks>,
    ) -> Result<Var, GeneratorError> {
        if batch.is_empty() {
            return Err(GeneratorError::EmptyBatch);
        }
        for s in batch {
            self.check_sequence(s)?;
        }
        let steps = batch.iter().map(|s| s.ids.len() - 1).max().expect("non-empty");
        if let Some(m) = masks {
            if m.embed.len() < steps || m.hidden.len() < steps {
                return Err(GeneratorError::Dimension(format!("{} dropout masks for {} steps", m.embed.len(), steps)));
            }
        }
        let das: Vec<&[f64]> = batch.iter().map(|s| s.da.as_slice()).collect();
        let mut state = self.initial_state(tape, &das)?;
        let mut total: Option<Var> = None;
        for t in 0..steps {
            let inputs: Vec<usize> = batch.iter().map(|s| *s.ids.get(t).unwrap_or(&super::PAD)).collect();
            let (next, logits) = self.step(
                tape,
                p,
                state,
                &inputs,
                masks.map(|m| &m.embed[t]),
                masks.map(|m| &m.hidden[t]),
            )?;
            state = next;
            let mut pick = vec![0.0; batch.len() * self.vocab_size];
            for (b, s) in batch.iter().enumerate() {
                if let Some(&y) = s.ids.get(t + 1) {
                    pick[b * self.vocab_size + y] = 1.0;
                }
            }
            let logp = tape.log_softmax(logits)?;
            let chosen = tape.mul_const(logp, NumericArray::matrix(batch.len(), self.vocab_size, pick)?)?;
            let step_sum = tape.sum(chosen)?;
            total = Some(match total {
                None => step_sum,
                Some(acc) => tape.add(acc, step_sum)?,
            });
        }
        Ok(tape.scale(total.expect("at least one step"), -1.0 / batch.len() as f64)?)
    }

    /// Negative log-likelihood of one sequence.
    pub fn sequence_nll(
        &self,
        tape: &mut Tape,
        p: &ParamNodes,
        seq: &Sequence,
        masks: Option<&DropoutMasks>,
    ) -> Result<Var, GeneratorError> {
        self.batch_nll(tape, p, &[seq], masks)
    }

    pub fn weights(&self, params: &ParameterVector) -> Result<Weights, GeneratorError> {
        self.check_params(params)?;
        let s = |i: usize| params.segment_array(i);
        Ok(Weights {
            embed: s(0),
            w_x: s(1),
            w_h: s(2),
            b_gates: s(3),
            w_rx: s(4),
            w_rh: s(5),
            b_r: s(6),
            w_d: s(7),
            w_out: s(8),
            b_out: s(9),
        })
    }

    pub fn plain_initial(&self, das: &[&[f64]]) -> Result<PlainState, GeneratorError> {
        let zeros = NumericArray::zeros(&[das.len(), self.config.hidden]);
        Ok(PlainState {
            h: zeros.clone(),
            c: zeros,
            da: self.da_matrix(das)?,
        })
    }

    /// Tape-free step without dropout. Returns log-probabilities.
    pub fn plain_step(&self, w: &Weights, state: &PlainState, ids: &[usize]) -> Result<(PlainState, NumericArray), GeneratorError> {
        self.check_ids(ids)?;
        let (h, e, v) = (self.config.hidden, self.config.embed, self.vocab_size);
        let n = ids.len();
        let mut x = Vec::with_capacity(n * e);
        for &i in ids {
            x.extend_from_slice(&w.embed.data()[i * e..(i + 1) * e]);
        }
        let x = NumericArray::matrix(n, e, x)?;

        let mut pre = gemm(&x, &w.w_x, false, false)?;
        pre.add_assign(&gemm(&state.h, &w.w_h, false, false)?);
        add_rows(&mut pre, &w.b_gates);
        let mut r = gemm(&x, &w.w_rx, false, false)?;
        r.add_assign(&gemm(&state.h, &w.w_rh, false, false)?);
        add_rows(&mut r, &w.b_r);
        let da = r.zip_map(&state.da, |a, d| sigmoid(a) * d);
        let inj = gemm(&da, &w.w_d, false, false)?;

        let mut c = vec![0.0; n * h];
        let mut hn = vec![0.0; n * h];
        for b in 0..n {
            let g = &pre.data()[b * 4 * h..(b + 1) * 4 * h];
            for k in 0..h {
                let (ig, fg, og, cg) = (sigmoid(g[k]), sigmoid(g[h + k]), sigmoid(g[2 * h + k]), g[3 * h + k].tanh());
                let ck = fg * state.c.data()[b * h + k] + ig * cg + inj.data()[b * h + k].tanh();
                c[b * h + k] = ck;
                hn[b * h + k] = og * ck.tanh();
            }
        }
        let hn = NumericArray::matrix(n, h, hn)?;
        let mut logits = gemm(&hn, &w.w_out, false, false)?;
        add_rows(&mut logits, &w.b_out);
        let logp = NumericArray::matrix(n, v, log_softmax_rows(logits.data(), v))?;
        if !logp.is_finite() {
            return Err(GeneratorError::NonFinite);
        }
        Ok((
            PlainState {
                h: hn,
                c: NumericArray::matrix(n, h, c)?,
                da,
            },
            logp,
        ))
    }

    /// Per-sequence NLL without dropout.
    pub fn sequence_nlls(&self, params: &ParameterVector, seqs: &[&Sequence]) -> Result<Vec<f64>, GeneratorError> {
        let w = self.weights(params)?;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            for s in chunk {
                self.check_sequence(s)?;
            }
            let das: Vec<&[f64]> = chunk.iter().map(|s| s.da.as_slice()).collect();
            let mut state = self.plain_initial(&das)?;
            let steps = chunk.iter().map(|s| s.ids.len() - 1).max().unwrap_or(0);
            let mut nll = vec![0.0; chunk.len()];
            for t in 0..steps {
                let inputs: Vec<usize> = chunk.iter().map(|s| *s.ids.get(t).unwrap_or(&super::PAD)).collect();
                let (next, logp) = self.plain_step(&w, &state, &inputs)?;
                state = next;
                for (b, s) in chunk.iter().enumerate() {
                    if let Some(&y) = s.ids.get(t + 1) {
                        nll[b] -= logp.data()[b * self.vocab_size + y];
                    }
                }
            }
            out.extend(nll);
        }
        Ok(out)
    }

    /// Mean per-sequence NLL without dropout.
    pub fn mean_nll(&self, params: &ParameterVector, seqs: &[&Sequence]) -> Result<f64, GeneratorError> {
        if seqs.is_empty() {
            return Err(GeneratorError::EmptyBatch);
        }
        let all = self.sequence_nlls(params, seqs)?;
        Ok(all.iter().sum::<f64>() / all.len() as f64)
    }
}
