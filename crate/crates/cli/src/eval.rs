use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;

use meta_nlg::checkpoint::Checkpoint;
use meta_nlg::corpus::{load_corpus, load_schema, make_split, CorpusExample};
use meta_nlg::generator::DecodeOptions;
use meta_nlg::metrics::{evaluate, EvalResult};

use crate::run::Workspace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSet {
    Validation,
    Test,
    /// Every example in the corpus.
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained checkpoint
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Corpus JSON file; its schema must match the checkpoint's
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Schema file for corpora stored as a bare record list
    #[arg(long, value_name = "FILE")]
    pub schema: Option<PathBuf>,
    /// Examples to score; validation and test re-create the checkpoint's split
    #[arg(long, value_enum, default_value_t = EvalSet::Test)]
    pub set: EvalSet,
    /// Beam width [default: the checkpoint's]
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Also write the result to this JSON file
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    set: EvalSet,
    nll: f64,
    #[serde(flatten)]
    result: EvalResult,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let schema = args.schema.as_deref().map(load_schema).transpose()?;
    let corpus = load_corpus(&args.corpus, schema.as_ref())?;
    ck.check_schema(&corpus.schema)?;
    let ids: Vec<usize> = match args.set {
        EvalSet::All => (0..corpus.len()).collect(),
        set => {
            let spec = ck.header.split.as_ref().ok_or_else(|| anyhow!("checkpoint records no split; use --set all"))?;
            let split = make_split(&corpus, spec, ck.header.split_seed.unwrap_or(ck.header.seed))?;
            if set == EvalSet::Test {
                split.test
            } else {
                split.validation
            }
        }
    };
    let ws = Workspace::with_vocab(corpus, ck.header.vocab.clone())?;
    let g = ck.generator()?;
    let opts = DecodeOptions {
        beam_width: args.beam_width.unwrap_or(ck.header.train.beam_width),
        max_len: ck.header.train.max_decode_len,
        ..DecodeOptions::default()
    };
    let examples: Vec<&CorpusExample> = ids.iter().map(|&i| &ws.corpus.examples[i]).collect();
    let das: Vec<Vec<f64>> = ids.iter().map(|&i| ws.items[i].da.clone()).collect();
    let seqs: Vec<_> = ids.iter().map(|&i| &ws.items[i]).collect();
    let summary = EvalSummary {
        set: args.set,
        nll: g.mean_nll(&ck.params, &seqs)?,
        result: evaluate(&g, &ck.params, &ws.vocab, &examples, &das, &opts)?,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    if let Some(p) = &args.out {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{text}");
    Ok(())
}
