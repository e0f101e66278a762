use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use meta_nlg::corpus::SplitMode;
use meta_nlg::generator::ModelConfig;
use meta_nlg::optim::{FineTuneConfig, MetaConfig, Regime, TrainConfig};

pub const SEED_ENV: &str = "META_NLG_SEED";

/// Everything a `train` or `sweep` run reads. Precedence: command-line
/// flags, then the JSON config file, then these defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    /// Schema file for corpora stored as a bare record list.
    pub schema: Option<PathBuf>,
    pub mode: SplitMode,
    /// Held-out label; the first declared domain or act when unset.
    pub target: Option<String>,
    pub adaptation_size: usize,
    pub validation_size: usize,
    pub regime: Regime,
    /// Falls back to `META_NLG_SEED`, then 0.
    pub seed: Option<u64>,
    /// Seed of the target shuffle; defaults to `seed`.
    pub split_seed: Option<u64>,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub fine_tune: FineTuneConfig,
    pub mtl_batch_size: Option<usize>,
    pub beam_width: usize,
    pub max_decode_len: usize,
    pub curve_metrics: bool,
    pub record_time: bool,
    /// Adaptation sizes of a sweep.
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub regimes: Vec<Regime>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            corpus: None,
            schema: None,
            mode: SplitMode::Domain,
            target: None,
            adaptation_size: 200,
            validation_size: 200,
            regime: Regime::Meta,
            seed: None,
            split_seed: None,
            out: PathBuf::from("out"),
            model: train.model,
            meta: train.meta,
            fine_tune: train.fine_tune,
            mtl_batch_size: None,
            beam_width: train.beam_width,
            max_decode_len: train.max_decode_len,
            curve_metrics: train.curve_metrics,
            record_time: train.record_time,
            sizes: vec![1000, 500, 200],
            repeats: 5,
            regimes: vec![Regime::Meta, Regime::Mtl, Regime::Scratch, Regime::Zero, Regime::Supervised],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            meta: self.meta.clone(),
            fine_tune: self.fine_tune.clone(),
            mtl_batch_size: self.mtl_batch_size,
            beam_width: self.beam_width,
            max_decode_len: self.max_decode_len,
            curve_metrics: self.curve_metrics,
            final_eval: true,
            record_time: self.record_time,
        }
    }

    pub fn resolved_seed(&self) -> Result<u64> {
        Ok(match self.seed {
            Some(s) => s,
            None => env_seed()?.unwrap_or(0),
        })
    }
}

/// The seed in `META_NLG_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer")),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

fn parse_mode(s: &str) -> Result<SplitMode, String> {
    match s {
        "domain" => Ok(SplitMode::Domain),
        "act-type" | "act" => Ok(SplitMode::ActType),
        _ => Err(format!("unknown split mode `{s}` (expected domain or act-type)")),
    }
}

/// Flags shared by `train` and `sweep`. Unset flags leave the config file
/// value in place.
#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// JSON run configuration; flags override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Corpus JSON file
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Schema file for corpora stored as a bare record list
    #[arg(long, value_name = "FILE")]
    pub schema: Option<PathBuf>,
    /// Hold out a domain [default: first declared domain]
    #[arg(long, value_name = "LABEL", conflicts_with_all = ["target_act", "target"])]
    pub target_domain: Option<String>,
    /// Hold out a dialogue-act type
    #[arg(long, value_name = "LABEL", conflicts_with = "target")]
    pub target_act: Option<String>,
    /// Held-out label, interpreted according to --mode
    #[arg(long, value_name = "LABEL")]
    pub target: Option<String>,
    /// Split mode: domain or act-type [default: domain]
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<SplitMode>,
    /// Target examples available for fine-tuning [default: 200]
    #[arg(long)]
    pub adaptation_size: Option<usize>,
    /// Target examples used for early stopping [default: 200]
    #[arg(long)]
    pub validation_size: Option<usize>,
    /// Master seed [default: $META_NLG_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the target shuffle [default: the master seed]
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Inner step size [default: 0.1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Outer learning rate, also the multi-task rate [default: 0.001]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Tasks per outer step [default: 5]
    #[arg(long)]
    pub meta_batch: Option<usize>,
    /// Drop the second-order term of the meta-gradient [default: off]
    #[arg(long)]
    pub first_order: bool,
    /// Global gradient-norm clip; 0 disables [default: 0.5]
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Cap on source-phase updates [default: 2000]
    #[arg(long)]
    pub max_outer_steps: Option<usize>,
    /// Examples in each of the support and query sets [default: 200]
    #[arg(long)]
    pub task_half_size: Option<usize>,
    /// Multi-task minibatch size [default: meta-batch x 2 x task-half-size]
    #[arg(long)]
    pub mtl_batch_size: Option<usize>,
    /// Recurrent hidden size [default: 100]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Embedding size [default: 50]
    #[arg(long)]
    pub embed: Option<usize>,
    /// Dropout rate during training [default: 0.25]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Fine-tuning epoch cap [default: 50]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping [default: 5]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Fine-tuning minibatch size [default: 10]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Plain fine-tuning learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Beam width for evaluation [default: 5]
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Longest decoded sequence [default: 40]
    #[arg(long)]
    pub max_decode_len: Option<usize>,
    /// Skip decoding the validation set after every fine-tuning epoch [default: off]
    #[arg(long)]
    pub no_curve_metrics: bool,
    /// Write wall-clock seconds into reports, which makes them irreproducible [default: off]
    #[arg(long)]
    pub record_time: bool,
}

impl RunArgs {
    /// Loads the config file if given and applies the flags on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        if self.corpus.is_some() {
            c.corpus = self.corpus.clone();
        }
        if self.schema.is_some() {
            c.schema = self.schema.clone();
        }
        if let Some(t) = &self.target_domain {
            c.mode = SplitMode::Domain;
            c.target = Some(t.clone());
        }
        if let Some(t) = &self.target_act {
            c.mode = SplitMode::ActType;
            c.target = Some(t.clone());
        }
        set!(self.mode => c.mode);
        if self.target.is_some() {
            c.target = self.target.clone();
        }
        set!(self.adaptation_size => c.adaptation_size);
        set!(self.validation_size => c.validation_size);
        if self.seed.is_some() {
            c.seed = self.seed;
        }
        if self.split_seed.is_some() {
            c.split_seed = self.split_seed;
        }
        set!(self.out => c.out);
        set!(self.alpha => c.meta.alpha);
        set!(self.beta => c.meta.beta);
        set!(self.meta_batch => c.meta.meta_batch);
        if self.first_order {
            c.meta.second_order = false;
        }
        if let Some(v) = self.clip_norm {
            c.meta.clip_norm = (v > 0.0).then_some(v);
        }
        set!(self.max_outer_steps => c.meta.max_outer_steps);
        set!(self.task_half_size => c.meta.task_half_size);
        if self.mtl_batch_size.is_some() {
            c.mtl_batch_size = self.mtl_batch_size;
        }
        set!(self.hidden => c.model.hidden);
        set!(self.embed => c.model.embed);
        set!(self.dropout => c.model.dropout);
        set!(self.max_epochs => c.fine_tune.max_epochs);
        set!(self.patience => c.fine_tune.patience);
        set!(self.batch_size => c.fine_tune.batch_size);
        set!(self.lr => c.fine_tune.lr);
        set!(self.beam_width => c.beam_width);
        set!(self.max_decode_len => c.max_decode_len);
        if self.no_curve_metrics {
            c.curve_metrics = false;
        }
        if self.record_time {
            c.record_time = true;
        }
        c.meta.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"adaptation_size": 50, "meta": {"alpha": 0.2, "beta": 0.01}, "seed": 4}"#).unwrap();
        let args = RunArgs {
            config: Some(path),
            alpha: Some(0.3),
            ..RunArgs::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!(c.meta.alpha, 0.3);
        assert_eq!(c.meta.beta, 0.01);
        assert_eq!(c.adaptation_size, 50);
        assert_eq!(c.validation_size, 200);
        assert_eq!(c.resolved_seed().unwrap(), 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"adaptaton_size": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"layers": 2}}"#).is_err());
        assert_eq!(serde_json::from_str::<RunConfig>("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn target_flags_set_the_mode() {
        let c = RunArgs {
            target_act: Some("inform".into()),
            ..RunArgs::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(c.mode, SplitMode::ActType);
        assert_eq!(c.target.as_deref(), Some("inform"));
        let c = RunArgs {
            clip_norm: Some(0.0),
            first_order: true,
            ..RunArgs::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(c.meta.clip_norm, None);
        assert!(!c.meta.second_order);
    }

    #[test]
    fn invalid_values_fail_resolution() {
        let args = RunArgs {
            alpha: Some(-1.0),
            ..RunArgs::default()
        };
        assert!(args.resolve().is_err());
    }
}
