mod config;
mod eval;
mod generate;
mod lock;
mod run;
mod synth;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunArgs;
use meta_nlg::optim::Regime;

/// Meta-learned natural language generation for low-resource dialogue
/// domains.
#[derive(Parser, Debug)]
#[command(name = "meta-nlg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one regime on a leave-one-out split and evaluate it
    Train(TrainArgs),
    /// Decode utterances for dialogue acts with a trained checkpoint
    Generate(generate::GenerateArgs),
    /// Write a synthetic corpus
    Synth(synth::SynthArgs),
    /// Train and evaluate several regimes over adaptation sizes and repeats
    Sweep(SweepArgs),
    /// Score a checkpoint on a corpus
    Eval(eval::EvalArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// scratch, mtl, zero, supervised or meta [default: meta]
    #[arg(long)]
    regime: Option<Regime>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Comma-separated adaptation sizes; an empty string sweeps nothing [default: 1000,500,200]
    #[arg(long, value_name = "LIST")]
    sizes: Option<String>,
    /// Seeded repeats per size [default: 5]
    #[arg(long)]
    repeats: Option<usize>,
    /// Comma-separated regimes [default: meta,mtl,scratch,zero,supervised]
    #[arg(long, value_delimiter = ',')]
    regimes: Option<Vec<Regime>>,
    #[command(flatten)]
    run: RunArgs,
}

fn parse_sizes(list: &str) -> anyhow::Result<Vec<usize>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| anyhow::anyhow!("invalid size `{s}`: {e}")))
        .collect()
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => {
            let mut cfg = a.run.resolve()?;
            if let Some(r) = a.regime {
                cfg.regime = r;
            }
            run::cmd_train(&cfg)
        }
        Command::Sweep(a) => {
            let mut cfg = a.run.resolve()?;
            if let Some(s) = a.sizes {
                cfg.sizes = parse_sizes(&s)?;
            }
            if let Some(r) = a.repeats {
                cfg.repeats = r;
            }
            if let Some(r) = a.regimes {
                cfg.regimes = r;
            }
            run::cmd_sweep(&cfg)
        }
        Command::Generate(a) => generate::cmd_generate(&a),
        Command::Synth(a) => synth::cmd_synth(&a),
        Command::Eval(a) => eval::cmd_eval(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
