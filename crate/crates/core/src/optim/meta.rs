use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{apply_update, converged, AdamState, LossModel, MetaConfig, OptimError};
use crate::autodiff::{adapted_gradient, grad, GradientVector, ParamNodes, ParameterVector, Tape, UpdateGradient};
use crate::corpus::{MetaTask, TaskSampler};
use crate::metrics::{Phase, TrainRunReport};

/// Support and query items of one episode.
#[derive(Clone, Debug)]
pub struct Task<'a, T> {
    pub support: Vec<&'a T>,
    pub query: Vec<&'a T>,
}

impl<'a, T> Task<'a, T> {
    /// Resolves the example ids of `task` against `items`.
    pub fn resolve(task: &MetaTask, items: &'a [T]) -> Self {
        Self {
            support: task.support.iter().map(|&i| &items[i]).collect(),
            query: task.query.iter().map(|&i| &items[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Mean support loss at θ.
    pub inner_loss: f64,
    /// Mean query loss at the adapted parameters.
    pub outer_loss: f64,
    /// Norm of the averaged gradient before clipping.
    pub grad_norm: f64,
}

/// One plain gradient step on the mean support loss: `θ - α ∇L(θ)`.
pub fn inner_adapt<M: LossModel>(
    model: &M,
    params: &ParameterVector,
    support: &[&M::Item],
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ParameterVector, OptimError> {
    if support.is_empty() {
        return Err(OptimError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let nodes = ParamNodes::bind(&mut tape, params)?;
    let loss = model.batch_loss(&mut tape, &nodes, support, rng)?;
    if !tape.value(loss).item().is_finite() {
        return Err(OptimError::NonFinite("support loss".into()));
    }
    let g = grad(&tape, loss, &nodes)?;
    let mut adapted = params.clone();
    adapted.axpy(-alpha, &g)?;
    Ok(adapted)
}

/// Gradient of the query loss at the adapted parameters with respect to the
/// original ones. `second_order` keeps the inner-step Jacobian.
pub fn task_gradient<M: LossModel>(
    model: &M,
    params: &ParameterVector,
    task: &Task<'_, M::Item>,
    alpha: f64,
    second_order: bool,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateGradient, OptimError> {
    if task.support.is_empty() || task.query.is_empty() {
        return Err(OptimError::EmptyBatch);
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(OptimError::InvalidConfig(format!("inner step size {alpha}")));
    }
    let mut inner_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut outer_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let r = adapted_gradient(
        |tape: &mut Tape, p: &ParamNodes| model.batch_loss(tape, p, &task.query, &mut outer_rng),
        |tape: &mut Tape, p: &ParamNodes| model.batch_loss(tape, p, &task.support, &mut inner_rng),
        params,
        alpha,
        !second_order,
    )?;
    if !r.inner_loss.is_finite() || !r.outer_loss.is_finite() || !r.gradient.is_finite() {
        return Err(OptimError::NonFinite(format!(
            "task gradient (support loss {}, query loss {}, gradient norm {})",
            r.inner_loss,
            r.outer_loss,
            r.gradient.norm()
        )));
    }
    Ok(r)
}

/// One outer update from a batch of tasks. The per-task gradients are
/// averaged in task order, clipped, and applied with rate `beta`.
pub fn meta_step<M: LossModel>(
    model: &M,
    params: &mut ParameterVector,
    tasks: &[Task<'_, M::Item>],
    cfg: &MetaConfig,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats, OptimError> {
    if tasks.is_empty() {
        return Err(OptimError::EmptyBatch);
    }
    let mut total = GradientVector::zeros(params.layout().clone());
    let (mut inner, mut outer) = (0.0, 0.0);
    for (k, task) in tasks.iter().enumerate() {
        let r = task_gradient(model, params, task, cfg.alpha, cfg.second_order, rng).map_err(|e| match e {
            OptimError::NonFinite(m) => OptimError::NonFinite(format!("{m} in task {k}")),
            other => other,
        })?;
        total.add_assign(&r.gradient)?;
        inner += r.inner_loss;
        outer += r.outer_loss;
    }
    let k = tasks.len() as f64;
    total.scale(1.0 / k);
    let grad_norm = apply_update(params, total, cfg.beta, cfg.clip_norm, cfg.rule, adam)?;
    Ok(StepStats {
        inner_loss: inner / k,
        outer_loss: outer / k,
        grad_norm,
    })
}

/// Outer loop: samples `meta_batch` tasks per step until the moving average
/// of the query loss stops improving or `max_outer_steps` is reached.
/// Returns the final parameters and the per-step query losses.
#[allow(clippy::too_many_arguments)]
pub fn meta_train<M: LossModel>(
    model: &M,
    theta0: &ParameterVector,
    items: &[M::Item],
    sampler: &mut TaskSampler,
    cfg: &MetaConfig,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
    mut report: Option<&mut TrainRunReport>,
) -> Result<(ParameterVector, Vec<f64>), OptimError> {
    cfg.validate()?;
    let mut params = theta0.clone();
    let mut history = Vec::new();
    for step in 1..=cfg.max_outer_steps {
        let batch = sampler.next_batch(cfg.meta_batch)?;
        let tasks: Vec<Task<'_, M::Item>> = batch.iter().map(|t| Task::resolve(t, items)).collect();
        let stats = meta_step(model, &mut params, &tasks, cfg, adam, rng)?;
        log::debug!("meta step {step}: query loss {:.4}, grad norm {:.4}", stats.outer_loss, stats.grad_norm);
        history.push(stats.outer_loss);
        if let Some(r) = report.as_deref_mut() {
            r.push(Phase::Source, step, "query", stats.outer_loss, None, None)?;
        }
        if converged(&history, cfg.convergence_window, cfg.convergence_tol) {
            log::info!("meta-training converged after {step} steps");
            break;
        }
    }
    Ok((params, history))
}
