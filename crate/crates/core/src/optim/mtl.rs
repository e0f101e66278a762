use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::{apply_update, converged, AdamState, LossModel, MetaConfig, OptimError};
use crate::autodiff::{grad, ParamNodes, ParameterVector, Tape};
use crate::metrics::{Phase, TrainRunReport};

/// One update on the mean loss over `batch`. Returns the loss before the
/// update.
#[allow(clippy::too_many_arguments)]
pub fn mtl_step<M: LossModel>(
    model: &M,
    params: &mut ParameterVector,
    batch: &[&M::Item],
    lr: f64,
    cfg: &MetaConfig,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<f64, OptimError> {
    if batch.is_empty() {
        return Err(OptimError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let nodes = ParamNodes::bind(&mut tape, params)?;
    let loss = model.batch_loss(&mut tape, &nodes, batch, rng)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(OptimError::NonFinite("training loss".into()));
    }
    let g = grad(&tape, loss, &nodes)?;
    apply_update(params, g, lr, cfg.clip_norm, cfg.rule, adam)?;
    Ok(value)
}

/// Multi-task training on a pooled set: minibatches of `batch_size` drawn
/// without replacement per step, same stopping rule and step budget as
/// [`super::meta_train`].
#[allow(clippy::too_many_arguments)]
pub fn mtl_train<M: LossModel>(
    model: &M,
    theta0: &ParameterVector,
    pool: &[&M::Item],
    batch_size: usize,
    cfg: &MetaConfig,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
    mut report: Option<&mut TrainRunReport>,
) -> Result<(ParameterVector, Vec<f64>), OptimError> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(OptimError::EmptyBatch);
    }
    let size = batch_size.clamp(1, pool.len());
    let mut params = theta0.clone();
    let mut history = Vec::new();
    for step in 1..=cfg.max_outer_steps {
        let batch: Vec<&M::Item> = sample(rng, pool.len(), size).into_iter().map(|i| pool[i]).collect();
        let loss = mtl_step(model, &mut params, &batch, cfg.beta, cfg, adam, rng)?;
        history.push(loss);
        if let Some(r) = report.as_deref_mut() {
            r.push(Phase::Source, step, "train", loss, None, None)?;
        }
        if converged(&history, cfg.convergence_window, cfg.convergence_tol) {
            log::info!("multi-task training converged after {step} steps");
            break;
        }
    }
    Ok((params, history))
}
