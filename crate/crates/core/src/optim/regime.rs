use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, fine_tune, meta_train, mtl_train, AdamState, FineTuneConfig, FineTuneMode, FineTuneOutcome, MetaConfig, OptimError,
};
use crate::autodiff::ParameterVector;
use crate::corpus::{Corpus, CorpusExample, ModalityIndex, Split, TaskSampler};
use crate::generator::{DecodeOptions, Generator, ModelConfig, Sequence, Vocabulary};
use crate::metrics::{evaluate, EvalResult, Phase, TrainRunReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Random initialization, plain fine-tuning on the target.
    Scratch,
    /// Multi-task training on the source pool, then plain fine-tuning.
    Mtl,
    /// Multi-task training on the source pool only.
    Zero,
    /// Multi-task training on source and target data together.
    Supervised,
    /// Meta-training on the source pool, then episodic fine-tuning.
    Meta,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::Scratch, Regime::Mtl, Regime::Zero, Regime::Supervised, Regime::Meta];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Scratch => "scratch",
            Regime::Mtl => "mtl",
            Regime::Zero => "zero",
            Regime::Supervised => "supervised",
            Regime::Meta => "meta",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown regime `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub fine_tune: FineTuneConfig,
    /// Minibatch size of multi-task training. Defaults to the number of
    /// examples one outer meta step sees.
    pub mtl_batch_size: Option<usize>,
    pub beam_width: usize,
    pub max_decode_len: usize,
    /// Decode the validation set after every fine-tuning epoch.
    pub curve_metrics: bool,
    /// Final BLEU-4/ERR evaluation on validation and test.
    pub final_eval: bool,
    /// Wall-clock seconds in reports; off keeps reports byte-reproducible.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            meta: MetaConfig::default(),
            fine_tune: FineTuneConfig::default(),
            mtl_batch_size: None,
            beam_width: 5,
            max_decode_len: 40,
            curve_metrics: true,
            final_eval: true,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn mtl_batch(&self) -> usize {
        self.mtl_batch_size
            .unwrap_or(self.meta.meta_batch * 2 * self.meta.task_half_size)
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            beam_width: self.beam_width,
            max_len: self.max_decode_len,
            ..DecodeOptions::default()
        }
    }
}

/// Everything a regime reads. `items[i]` is the encoding of example `i`.
#[derive(Clone, Copy, Debug)]
pub struct RegimeInputs<'a> {
    pub corpus: &'a Corpus,
    pub split: &'a Split,
    pub generator: &'a Generator,
    pub vocab: &'a Vocabulary,
    pub items: &'a [Sequence],
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct RegimeOutcome {
    pub regime: Regime,
    pub params: ParameterVector,
    /// Parameters at the end of source training, if there was any.
    pub source_params: Option<ParameterVector>,
    pub source_steps: usize,
    pub fine_tune: Option<FineTuneOutcome>,
    pub validation_nll: f64,
    pub test_nll: f64,
    pub validation: Option<EvalResult>,
    pub test: Option<EvalResult>,
    pub report: TrainRunReport,
}

fn pick<'a>(items: &'a [Sequence], ids: &[usize]) -> Vec<&'a Sequence> {
    ids.iter().map(|&i| &items[i]).collect()
}

fn examples<'a>(corpus: &'a Corpus, ids: &[usize]) -> Vec<&'a CorpusExample> {
    ids.iter().map(|&i| &corpus.examples[i]).collect()
}

fn das(items: &[Sequence], ids: &[usize]) -> Vec<Vec<f64>> {
    ids.iter().map(|&i| items[i].da.clone()).collect()
}

/// Trains and evaluates one regime on `inputs.split`.
pub fn run_regime(regime: Regime, inputs: RegimeInputs<'_>, cfg: &TrainConfig) -> Result<RegimeOutcome, OptimError> {
    let RegimeInputs {
        corpus,
        split,
        generator: g,
        vocab,
        items,
        seed,
    } = inputs;
    cfg.meta.validate()?;
    let mut report = TrainRunReport::new(cfg.record_time);
    let theta0 = g.init_params(derive_seed(seed, "init"));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "train"));
    let opts = cfg.decode_options();

    let source = pick(items, &split.source);
    let adapt = pick(items, &split.adaptation);
    let validation = pick(items, &split.validation);
    let test = pick(items, &split.test);

    let mut adam = AdamState::new(theta0.len());
    let (source_params, source_steps) = match regime {
        Regime::Scratch => (None, 0),
        Regime::Mtl | Regime::Zero => {
            let (p, h) = mtl_train(g, &theta0, &source, cfg.mtl_batch(), &cfg.meta, &mut adam, &mut rng, Some(&mut report))?;
            (Some(p), h.len())
        }
        Regime::Supervised => {
            let pool: Vec<&Sequence> = source.iter().chain(&adapt).chain(&validation).copied().collect();
            let (p, h) = mtl_train(g, &theta0, &pool, cfg.mtl_batch(), &cfg.meta, &mut adam, &mut rng, Some(&mut report))?;
            (Some(p), h.len())
        }
        Regime::Meta => {
            let index = ModalityIndex::new(corpus, &split.source, split.spec.mode);
            let mut sampler = TaskSampler::new(
                index,
                cfg.meta.task_half_size,
                ChaCha8Rng::seed_from_u64(derive_seed(seed, "sampler")),
            );
            let (p, h) = meta_train(g, &theta0, items, &mut sampler, &cfg.meta, &mut adam, &mut rng, Some(&mut report))?;
            (Some(p), h.len())
        }
    };

    let fine = match regime {
        Regime::Scratch | Regime::Mtl | Regime::Meta => {
            let init = source_params.as_ref().unwrap_or(&theta0);
            let mode = if regime == Regime::Meta {
                FineTuneMode::Episodic
            } else {
                FineTuneMode::Plain
            };
            let val_examples = examples(corpus, &split.validation);
            let val_das = das(items, &split.validation);
            let mut score = |p: &ParameterVector| -> Result<(f64, f64), OptimError> {
                let r = evaluate(g, p, vocab, &val_examples, &val_das, &opts)?;
                Ok((r.bleu4, r.err))
            };
            let scorer: Option<&mut super::finetune::Scorer<'_>> = if cfg.curve_metrics { Some(&mut score) } else { None };
            Some(fine_tune(
                g,
                init,
                &adapt,
                &validation,
                mode,
                &cfg.meta,
                &cfg.fine_tune,
                derive_seed(seed, "fine-tune"),
                Some(&mut report),
                scorer,
            )?)
        }
        Regime::Zero | Regime::Supervised => None,
    };

    let params = match (&fine, &source_params) {
        (Some(f), _) => f.params.clone(),
        (None, Some(p)) => p.clone(),
        (None, None) => theta0,
    };

    let validation_nll = g.mean_nll(&params, &validation)?;
    let test_nll = g.mean_nll(&params, &test)?;
    let (val_eval, test_eval) = if cfg.final_eval {
        let v = evaluate(g, &params, vocab, &examples(corpus, &split.validation), &das(items, &split.validation), &opts)?;
        let t = evaluate(g, &params, vocab, &examples(corpus, &split.test), &das(items, &split.test), &opts)?;
        (Some(v), Some(t))
    } else {
        (None, None)
    };
    report.push(
        Phase::Eval,
        0,
        "validation",
        validation_nll,
        val_eval.as_ref().map(|r| r.bleu4),
        val_eval.as_ref().map(|r| r.err),
    )?;
    report.push(
        Phase::Eval,
        1,
        "test",
        test_nll,
        test_eval.as_ref().map(|r| r.bleu4),
        test_eval.as_ref().map(|r| r.err),
    )?;

    Ok(RegimeOutcome {
        regime,
        params,
        source_params,
        source_steps,
        fine_tune: fine,
        validation_nll,
        test_nll,
        validation: val_eval,
        test: test_eval,
        report,
    })
}
