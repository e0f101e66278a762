use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Deserialize;

use meta_nlg::checkpoint::Checkpoint;
use meta_nlg::corpus::{relexicalize, DialogueAct};
use meta_nlg::generator::DecodeOptions;

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Trained checkpoint
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Dialogue act as inline JSON, e.g. '[{"domain":"hotel","act":"inform","slots":[["area","north"]]}]'
    #[arg(long, value_name = "JSON", conflicts_with = "da_file", required_unless_present = "da_file")]
    pub da: Option<String>,
    /// File holding one dialogue act or a JSON list of them
    #[arg(long, value_name = "FILE")]
    pub da_file: Option<PathBuf>,
    /// Beam width [default: the checkpoint's]
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Longest decoded sequence [default: the checkpoint's]
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Print at most this many hypotheses per act [default: all in the beam]
    #[arg(long)]
    pub top: Option<usize>,
    /// Fill placeholders with the slot values of the act [default: off]
    #[arg(long)]
    pub relex: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DaInput {
    One(DialogueAct),
    Many(Vec<DialogueAct>),
}

pub fn parse_das(text: &str) -> Result<Vec<DialogueAct>> {
    let input: DaInput = serde_json::from_str(text).context("parsing dialogue act JSON")?;
    Ok(match input {
        DaInput::One(da) => vec![da],
        DaInput::Many(das) => das,
    })
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let text = match (&args.da, &args.da_file) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        (None, None) => bail!("give --da or --da-file"),
    };
    let das = parse_das(&text)?;
    let schema = &ck.header.schema;
    let vocab = &ck.header.vocab;
    let g = ck.generator()?;
    let opts = DecodeOptions {
        beam_width: args.beam_width.unwrap_or(ck.header.train.beam_width),
        max_len: args.max_len.unwrap_or(ck.header.train.max_decode_len),
        ..DecodeOptions::default()
    };
    let encoded = das
        .iter()
        .enumerate()
        .map(|(i, da)| schema.encode_da(da).with_context(|| format!("dialogue act {i}")))
        .collect::<Result<Vec<_>>>()?;
    for (i, (da, v)) in das.iter().zip(&encoded).enumerate() {
        if i > 0 {
            println!();
        }
        let hyps = g.decode(&ck.params, v, &opts)?;
        for h in hyps.iter().take(args.top.unwrap_or(usize::MAX)) {
            let mut tokens = vocab.decode(&h.ids);
            if args.relex {
                tokens = relexicalize(&tokens, da);
            }
            println!("{:.6}\t{}", h.score, tokens.join(" "));
        }
    }
    Ok(())
}
