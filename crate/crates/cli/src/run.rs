use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use meta_nlg::checkpoint::Checkpoint;
use meta_nlg::corpus::{load_corpus, load_schema, make_split, Corpus, Split, SplitMode, SplitSpec};
use meta_nlg::generator::{encode_example, Generator, Sequence, Vocabulary};
use meta_nlg::metrics::EvalResult;
use meta_nlg::optim::{run_regime, Regime, RegimeInputs, RegimeOutcome};

use crate::config::RunConfig;
use crate::lock::DirLock;

/// Corpus, vocabulary and encoded examples shared by every run on it.
pub struct Workspace {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub items: Vec<Sequence>,
}

impl Workspace {
    pub fn load(corpus: Option<&Path>, schema: Option<&Path>) -> Result<Self> {
        let path = corpus.ok_or_else(|| anyhow!("no corpus given (use --corpus or set `corpus` in the config)"))?;
        let schema = schema.map(load_schema).transpose().context("loading schema")?;
        let corpus = load_corpus(path, schema.as_ref()).with_context(|| format!("loading corpus {}", path.display()))?;
        let vocab = Vocabulary::build(&corpus.schema, &corpus.examples);
        Ok(Self::with_vocab(corpus, vocab)?)
    }

    pub fn with_vocab(corpus: Corpus, vocab: Vocabulary) -> Result<Self> {
        let items = corpus
            .examples
            .iter()
            .map(|e| encode_example(&corpus.schema, &vocab, e))
            .collect::<Result<_, _>>()?;
        Ok(Self { corpus, vocab, items })
    }

    pub fn default_target(&self, mode: SplitMode) -> Result<String> {
        let labels = match mode {
            SplitMode::Domain => &self.corpus.schema.domains,
            SplitMode::ActType => &self.corpus.schema.acts,
        };
        labels.first().cloned().ok_or_else(|| anyhow!("schema declares no labels to hold out"))
    }

    pub fn split(&self, cfg: &RunConfig, adaptation_size: usize, split_seed: u64) -> Result<Split> {
        let spec = SplitSpec {
            mode: cfg.mode,
            target: match &cfg.target {
                Some(t) => t.clone(),
                None => self.default_target(cfg.mode)?,
            },
            adaptation_size,
            validation_size: cfg.validation_size,
        };
        Ok(make_split(&self.corpus, &spec, split_seed)?)
    }

    pub fn run(&self, split: &Split, cfg: &RunConfig, regime: Regime, seed: u64) -> Result<(Generator, RegimeOutcome)> {
        let train = cfg.train_config();
        let g = Generator::new(self.vocab.len(), self.corpus.schema.da_dim(), train.model.clone())?;
        let out = run_regime(
            regime,
            RegimeInputs {
                corpus: &self.corpus,
                split,
                generator: &g,
                vocab: &self.vocab,
                items: &self.items,
                seed,
            },
            &train,
        )
        .with_context(|| format!("{regime} run"))?;
        Ok((g, out))
    }
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub regime: Regime,
    pub seed: u64,
    pub split_seed: u64,
    pub mode: SplitMode,
    pub target: String,
    pub adaptation_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub source_steps: usize,
    pub fine_tune_epochs: Option<usize>,
    pub best_epoch: Option<usize>,
    pub validation_nll: f64,
    pub test_nll: f64,
    pub validation: Option<EvalResult>,
    pub test: Option<EvalResult>,
}

impl RunSummary {
    pub fn new(out: &RegimeOutcome, split: &Split, seed: u64, split_seed: u64) -> Self {
        Self {
            regime: out.regime,
            seed,
            split_seed,
            mode: split.spec.mode,
            target: split.spec.target.clone(),
            adaptation_size: split.adaptation.len(),
            validation_size: split.validation.len(),
            test_size: split.test.len(),
            source_steps: out.source_steps,
            fine_tune_epochs: out.fine_tune.as_ref().map(|f| f.epochs),
            best_epoch: out.fine_tune.as_ref().map(|f| f.best_epoch),
            validation_nll: out.validation_nll,
            test_nll: out.test_nll,
            validation: out.validation.clone(),
            test: out.test.clone(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.resolved_seed()?;
    let split_seed = cfg.split_seed.unwrap_or(seed);
    let ws = Workspace::load(cfg.corpus.as_deref(), cfg.schema.as_deref())?;
    let split = ws.split(cfg, cfg.adaptation_size, split_seed)?;
    let _lock = DirLock::acquire(&cfg.out)?;
    log::info!(
        "{} on {} held-out `{}`: {} source, {} adaptation, {} validation, {} test",
        cfg.regime,
        if cfg.mode == SplitMode::Domain { "domain" } else { "act type" },
        split.spec.target,
        split.source.len(),
        split.adaptation.len(),
        split.validation.len(),
        split.test.len()
    );
    let (_, out) = ws.run(&split, cfg, cfg.regime, seed)?;

    let ck = Checkpoint::new(
        &ws.corpus.schema,
        &ws.vocab,
        &cfg.train_config(),
        cfg.regime,
        seed,
        Some((split.spec.clone(), split_seed)),
        out.params.clone(),
        None,
    );
    ck.save(&cfg.out.join("checkpoint.bin"))?;
    fs::write(cfg.out.join("report.csv"), out.report.to_csv())?;
    let summary = RunSummary::new(&out, &split, seed, split_seed);
    write_json(&cfg.out.join("summary.json"), &summary)?;
    if let Some(t) = &summary.test {
        println!(
            "{}: test BLEU-4 {:.4}, ERR {:.4}, NLL {:.4} over {} examples",
            cfg.regime, t.bleu4, t.err, summary.test_nll, t.n
        );
    }
    Ok(())
}

pub const SWEEP_HEADER: &str = "size,regime,repeats,bleu4,err,test_nll,validation_nll";

#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct Totals {
    pub n: usize,
    pub bleu4: f64,
    pub err: f64,
    pub test_nll: f64,
    pub validation_nll: f64,
}

impl Totals {
    pub fn add(&mut self, s: &RunSummary) {
        let t = s.test.as_ref().expect("final evaluation is on");
        self.n += 1;
        self.bleu4 += t.bleu4;
        self.err += t.err;
        self.test_nll += s.test_nll;
        self.validation_nll += s.validation_nll;
    }

    pub fn row(&self, size: usize, regime: Regime) -> String {
        let k = self.n as f64;
        format!(
            "{size},{regime},{},{},{},{},{}",
            self.n,
            self.bleu4 / k,
            self.err / k,
            self.test_nll / k,
            self.validation_nll / k
        )
    }
}

/// Runs every regime on `repeats` seeded splits per adaptation size. Repeat
/// `r` uses seed `seed + r` for both the split and training.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.resolved_seed()?;
    let base_split = cfg.split_seed.unwrap_or(seed);
    if cfg.repeats == 0 && !cfg.sizes.is_empty() {
        bail!("repeats must be at least 1");
    }
    let _lock = DirLock::acquire(&cfg.out)?;
    let mut rows = vec![SWEEP_HEADER.to_string()];
    if !cfg.sizes.is_empty() {
        let ws = Workspace::load(cfg.corpus.as_deref(), cfg.schema.as_deref())?;
        for &size in &cfg.sizes {
            let mut totals: BTreeMap<Regime, Totals> = BTreeMap::new();
            for r in 0..cfg.repeats as u64 {
                let (run_seed, split_seed) = (seed.wrapping_add(r), base_split.wrapping_add(r));
                let split = ws.split(cfg, size, split_seed)?;
                let dir = cfg.out.join(format!("size-{size}")).join(format!("rep-{r}"));
                fs::create_dir_all(&dir)?;
                for &regime in &cfg.regimes {
                    log::info!("size {size}, repeat {r}, {regime}");
                    let (_, out) = ws.run(&split, cfg, regime, run_seed)?;
                    fs::write(dir.join(format!("{regime}.csv")), out.report.to_csv())?;
                    let summary = RunSummary::new(&out, &split, run_seed, split_seed);
                    write_json(&dir.join(format!("{regime}.json")), &summary)?;
                    totals.entry(regime).or_default().add(&summary);
                }
            }
            for &regime in &cfg.regimes {
                if let Some(t) = totals.get(&regime) {
                    rows.push(t.row(size, regime));
                }
            }
        }
    }
    let mut text = rows.join("\n");
    text.push('\n');
    fs::write(cfg.out.join("summary.csv"), &text)?;
    print!("{text}");
    Ok(())
}
