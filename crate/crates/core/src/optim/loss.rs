use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::OptimError;
use crate::autodiff::{Layout, ParamNodes, ParameterVector, Tape, Var};
use crate::generator::{DropoutMasks, Generator, Sequence};

/// A differentiable mean loss over a batch of items.
pub trait LossModel {
    type Item;

    fn layout(&self) -> &Arc<Layout>;

    /// Mean loss over `batch` built on `tape`. Stochastic parts (dropout)
    /// draw from `rng`.
    fn batch_loss(&self, tape: &mut Tape, params: &ParamNodes, batch: &[&Self::Item], rng: &mut ChaCha8Rng) -> Result<Var, OptimError>;

    /// Deterministic mean loss, for validation.
    fn eval_loss(&self, params: &ParameterVector, batch: &[&Self::Item]) -> Result<f64, OptimError>;
}

impl LossModel for Generator {
    type Item = Sequence;

    fn layout(&self) -> &Arc<Layout> {
        Generator::layout(self)
    }

    fn batch_loss(&self, tape: &mut Tape, params: &ParamNodes, batch: &[&Sequence], rng: &mut ChaCha8Rng) -> Result<Var, OptimError> {
        let steps = batch.iter().map(|s| s.ids.len().saturating_sub(1)).max().unwrap_or(0);
        let masks = DropoutMasks::sample(rng, batch.len(), steps, self.config().embed, self.hidden(), self.config().dropout);
        Ok(self.batch_nll(tape, params, batch, masks.as_ref())?)
    }

    fn eval_loss(&self, params: &ParameterVector, batch: &[&Sequence]) -> Result<f64, OptimError> {
        Ok(self.mean_nll(params, batch)?)
    }
}

/// `½ a ‖θ‖²` regardless of the batch; a closed-form stand-in for the
/// generator in optimizer tests.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub a: f64,
    pub layout: Arc<Layout>,
}

impl Quadratic {
    pub fn new(a: f64, dim: usize) -> Self {
        Self {
            a,
            layout: Arc::new(Layout::new([("theta", vec![dim])])),
        }
    }
}

impl LossModel for Quadratic {
    type Item = ();

    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn batch_loss(&self, tape: &mut Tape, params: &ParamNodes, _batch: &[&()], _rng: &mut ChaCha8Rng) -> Result<Var, OptimError> {
        let t = params.vars()[0];
        let sq = tape.mul(t, t)?;
        let s = tape.sum(sq)?;
        Ok(tape.scale(s, 0.5 * self.a)?)
    }

    fn eval_loss(&self, params: &ParameterVector, _batch: &[&()]) -> Result<f64, OptimError> {
        Ok(0.5 * self.a * params.as_slice().iter().map(|x| x * x).sum::<f64>())
    }
}
