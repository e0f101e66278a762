//! Training regimes: episodic meta-learning with exact second-order outer
//! gradients, multi-task pre-training, fine-tuning with early stopping and
//! the baseline regimes built from them.

mod adam;
mod finetune;
mod loss;
mod meta;
mod mtl;
mod regime;


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::AdamState;
pub use finetune::{fine_tune, EarlyStop, FineTuneConfig, FineTuneMode, FineTuneOutcome};
pub use loss::{LossModel, Quadratic};
pub use meta::{inner_adapt, meta_step, meta_train, task_gradient, StepStats, Task};
pub use mtl::{mtl_step, mtl_train};
pub use regime::{run_regime, Regime, RegimeInputs, RegimeOutcome, TrainConfig};

use crate::autodiff::{AutodiffError, GradientVector, ParameterVector};
use crate::corpus::CorpusError;
use crate::generator::GeneratorError;
use crate::metrics::MetricsError;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
}

/// Update rule for the outer (meta) or multi-task step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterRule {
    Adam,
    /// Plain `θ -= β g`; used to check update arithmetic.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Inner step size.
    pub alpha: f64,
    /// Outer learning rate.
    pub beta: f64,
    /// Tasks per outer step.
    pub meta_batch: usize,
    /// Only a single inner step is supported.
    pub inner_steps: usize,
    pub second_order: bool,
    /// Global-norm clip applied to every outer or plain update; `None`
    /// disables clipping.
    pub clip_norm: Option<f64>,
    pub max_outer_steps: usize,
    /// Moving-average window for the convergence test.
    pub convergence_window: usize,
    /// Stop when the moving average improves by less than this fraction.
    pub convergence_tol: f64,
    /// Examples in each of the support and query sets.
    pub task_half_size: usize,
    pub rule: OuterRule,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.001,
            meta_batch: 5,
            inner_steps: 1,
            second_order: true,
            clip_norm: Some(0.5),
            max_outer_steps: 2000,
            convergence_window: 20,
            convergence_tol: 1e-3,
            task_half_size: 200,
            rule: OuterRule::Adam,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if self.meta_batch == 0 {
            return bad("meta_batch must be at least 1");
        }
        if self.inner_steps != 1 {
            return bad("only one inner step is supported");
        }
        if self.task_half_size == 0 {
            return bad("task_half_size must be at least 1");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        if self.convergence_window == 0 {
            return bad("convergence_window must be at least 1");
        }
        Ok(())
    }
}

/// Clips if configured, then applies the update rule.
pub(crate) fn apply_update(
    params: &mut ParameterVector,
    mut gradient: GradientVector,
    lr: f64,
    clip: Option<f64>,
    rule: OuterRule,
    adam: &mut AdamState,
) -> Result<f64, OptimError> {
    if !gradient.is_finite() {
        return Err(OptimError::NonFinite("gradient".into()));
    }
    let norm = match clip {
        Some(c) => gradient.clip_norm(c),
        None => gradient.norm(),
    };
    match rule {
        OuterRule::Adam => adam.step(params, &gradient, lr)?,
        OuterRule::Sgd => params.axpy(-lr, &gradient)?,
    }
    Ok(norm)
}

/// Moving-average convergence test over a loss history.
pub fn converged(history: &[f64], window: usize, tol: f64) -> bool {
    if window == 0 || history.len() < 2 * window {
        return false;
    }
    let n = history.len();
    let last: f64 = history[n - window..].iter().sum::<f64>() / window as f64;
    let prev: f64 = history[n - 2 * window..n - window].iter().sum::<f64>() / window as f64;
    (prev - last) / prev.abs().max(f64::MIN_POSITIVE) < tol
}

/// Independent seed for a named purpose, derived from a master seed.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(master ^ h).gen()
}
