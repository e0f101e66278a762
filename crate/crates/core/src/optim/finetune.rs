use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{meta_step, mtl_step, AdamState, LossModel, MetaConfig, OptimError, Task};
use crate::autodiff::ParameterVector;
use crate::corpus::{ModalityIndex, SplitMode, TaskSampler};
use crate::metrics::{Phase, TrainRunReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineTuneMode {
    /// Outer updates on tasks sampled from the adaptation set itself.
    Episodic,
    /// Adam on shuffled minibatches.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Minibatch size; an epoch is `ceil(|D_t| / batch_size)` updates in
    /// either mode.
    pub batch_size: usize,
    /// Learning rate of plain fine-tuning.
    pub lr: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            patience: 5,
            batch_size: 10,
            lr: 0.001,
        }
    }
}

/// Best validation loss seen so far and the parameters that produced it.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    pub best_nll: f64,
    pub best_params: ParameterVector,
    pub best_epoch: usize,
    pub patience: usize,
    pub bad_epochs: usize,
}

impl EarlyStop {
    pub fn new(initial_nll: f64, params: &ParameterVector, patience: usize) -> Self {
        Self {
            best_nll: initial_nll,
            best_params: params.clone(),
            best_epoch: 0,
            patience,
            bad_epochs: 0,
        }
    }

    /// Records an epoch. Returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, nll: f64, params: &ParameterVector) -> bool {
        if nll < self.best_nll {
            self.best_nll = nll;
            self.best_params = params.clone();
            self.best_epoch = epoch;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.bad_epochs >= self.patience
    }
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub params: ParameterVector,
    pub best_nll: f64,
    pub best_epoch: usize,
    pub epochs: usize,
    /// Validation loss before training and after each epoch.
    pub curve: Vec<f64>,
}

/// Scores parameters on the validation set as `(bleu4, err)`.
pub type Scorer<'a> = dyn FnMut(&ParameterVector) -> Result<(f64, f64), OptimError> + 'a;

/// Adapts `init` to `adapt`, evaluating validation loss after every epoch
/// and returning the best snapshot.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune<M: LossModel>(
    model: &M,
    init: &ParameterVector,
    adapt: &[&M::Item],
    validation: &[&M::Item],
    mode: FineTuneMode,
    meta: &MetaConfig,
    cfg: &FineTuneConfig,
    seed: u64,
    mut report: Option<&mut TrainRunReport>,
    mut scorer: Option<&mut Scorer<'_>>,
) -> Result<FineTuneOutcome, OptimError> {
    if adapt.is_empty() || validation.is_empty() {
        return Err(OptimError::EmptyBatch);
    }
    if cfg.batch_size == 0 {
        return Err(OptimError::InvalidConfig("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init.clone();
    let mut adam = AdamState::new(params.len());
    let steps = adapt.len().div_ceil(cfg.batch_size);

    let mut sampler = match mode {
        FineTuneMode::Episodic => {
            meta.validate()?;
            if adapt.len() < 2 {
                return Err(OptimError::InvalidConfig("episodic fine-tuning needs at least 2 adaptation examples".into()));
            }
            let ids: Vec<usize> = (0..adapt.len()).collect();
            let half = meta.task_half_size.min(adapt.len() / 2);
            let index = ModalityIndex::single("target", &ids, SplitMode::Domain);
            Some(TaskSampler::new(index, half, ChaCha8Rng::seed_from_u64(rng.gen())))
        }
        FineTuneMode::Plain => None,
    };

    let mut record = |epoch: usize, nll: f64, p: &ParameterVector, report: &mut Option<&mut TrainRunReport>| -> Result<(), OptimError> {
        let (bleu, err) = match scorer.as_deref_mut() {
            Some(s) => {
                let (b, e) = s(p)?;
                (Some(b), Some(e))
            }
            None => (None, None),
        };
        if let Some(r) = report.as_deref_mut() {
            r.push(Phase::Adapt, epoch, "validation", nll, bleu, err)?;
        }
        Ok(())
    };

    let initial = model.eval_loss(&params, validation)?;
    record(0, initial, &params, &mut report)?;
    let mut stop = EarlyStop::new(initial, &params, cfg.patience);
    let mut curve = vec![initial];
    let mut order: Vec<usize> = (0..adapt.len()).collect();
    let mut epochs = 0;
    for epoch in 1..=cfg.max_epochs {
        match sampler.as_mut() {
            Some(s) => {
                for _ in 0..steps {
                    let batch = s.next_batch(meta.meta_batch)?;
                    let tasks: Vec<Task<'_, M::Item>> = batch
                        .iter()
                        .map(|t| Task {
                            support: t.support.iter().map(|&i| adapt[i]).collect(),
                            query: t.query.iter().map(|&i| adapt[i]).collect(),
                        })
                        .collect();
                    meta_step(model, &mut params, &tasks, meta, &mut adam, &mut rng)?;
                }
            }
            None => {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch: Vec<&M::Item> = chunk.iter().map(|&i| adapt[i]).collect();
                    mtl_step(model, &mut params, &batch, cfg.lr, meta, &mut adam, &mut rng)?;
                }
            }
        }
        epochs = epoch;
        let nll = model.eval_loss(&params, validation)?;
        if !nll.is_finite() {
            return Err(OptimError::NonFinite("validation loss".into()));
        }
        curve.push(nll);
        record(epoch, nll, &params, &mut report)?;
        if stop.observe(epoch, nll, &params) {
            break;
        }
    }
    Ok(FineTuneOutcome {
        params: stop.best_params,
        best_nll: stop.best_nll,
        best_epoch: stop.best_epoch,
        epochs,
        curve,
    })
}
