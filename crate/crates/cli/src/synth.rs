use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use meta_nlg::corpus::{corpus_to_json, gen_synthetic, SynthSpec};

use crate::config::env_seed;

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output corpus file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// JSON generator spec; flags override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed [default: $META_NLG_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of domains [default: 5]
    #[arg(long)]
    pub domains: Option<usize>,
    /// Number of act types [default: 8]
    #[arg(long)]
    pub acts: Option<usize>,
    /// Number of slot names [default: 20]
    #[arg(long)]
    pub slots: Option<usize>,
    /// Surface templates per act and carrier phrases per slot [default: 4]
    #[arg(long)]
    pub templates: Option<usize>,
    /// Number of records [default: 2000]
    #[arg(long)]
    pub examples: Option<usize>,
    /// Distinct values per slot [default: 12]
    #[arg(long)]
    pub values_per_slot: Option<usize>,
    /// Fraction of records with a second act [default: 0.4]
    #[arg(long)]
    pub multi_act_rate: Option<f64>,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => {$(
            if let Some(v) = args.$f {
                spec.$f = v;
            }
        )*};
    }
    set!(domains, acts, slots, templates, examples, values_per_slot, multi_act_rate);
    anyhow::ensure!(
        [spec.domains, spec.acts, spec.slots, spec.templates, spec.values_per_slot].iter().all(|&n| n >= 1),
        "domains, acts, slots, templates and values per slot must be at least 1"
    );
    anyhow::ensure!((0.0..=1.0).contains(&spec.multi_act_rate), "multi-act rate must lie in [0, 1]");
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let file = gen_synthetic(&spec, seed);
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.out, corpus_to_json(&file)).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} records to {}", file.records.len(), args.out.display());
    Ok(())
}
