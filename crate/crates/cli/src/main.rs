//! `ccgs`: synthesize corpora, train, evaluate and inspect global-span models.

mod commands;
mod config;
mod failure;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccgs::corpus::SplitName;
use ccgs::evaluation::EvalMode;

use config::{parse_list, ConfigBuilder, RunConfig};
use failure::{Failure, ResultExt};

#[derive(Parser)]
#[command(name = "ccgs", version, about = "Video corpus answer localization with a global-span matrix")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `train.lr=0.001`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed; for training it also seeds initialization.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus file, or a directory holding train/val/test JSON.
    #[arg(long)]
    corpus: PathBuf,
    /// Split to read when `--corpus` is a directory.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: SplitName,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Rank@k cutoffs, comma separated.
    #[arg(long)]
    k_list: Option<String>,
    /// IoU thresholds, comma separated.
    #[arg(long)]
    thresholds: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus as train/val/test JSON.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write config, checkpoint and log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training corpus file, or a directory with train.json (and val.json).
        #[arg(long)]
        corpus: PathBuf,
        /// Validation corpus used for checkpoint selection.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split and write metrics JSON and CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        /// ccgs, bm25+ccgs-span or bm25.
        #[arg(long)]
        mode: Option<EvalMode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank videos and localize the answer for one question.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        mode: Option<EvalMode>,
        #[arg(long)]
        question_id: String,
        /// Ranked entries to include.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Compare the model, BM25 and the BM25-then-model pipeline.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    match s {
        "train" => Ok(SplitName::Train),
        "val" => Ok(SplitName::Val),
        "test" => Ok(SplitName::Test),
        other => Err(format!("unknown split `{other}`")),
    }
}

/// Defaults, then the config saved beside `checkpoint`, then `--config`,
/// then `--set`, then dedicated flags.
fn resolve(
    common: &Common,
    checkpoint: Option<&Path>,
    eval: Option<&EvalArgs>,
    mode: Option<EvalMode>,
) -> Result<RunConfig, Failure> {
    let mut b = ConfigBuilder::new();
    if let Some(sibling) = checkpoint.and_then(commands::sibling_config) {
        b.merge_file(&sibling).validation()?;
    }
    if let Some(path) = &common.config {
        b.merge_file(path).validation()?;
    }
    for o in &common.overrides {
        b.set(o).validation()?;
    }
    if let Some(seed) = common.seed {
        for key in ["seed", "train.seed", "train.model.init_seed"] {
            b.set(&format!("{key}={seed}")).validation()?;
        }
    }
    if let Some(mode) = mode {
        b.set(&format!("mode={mode}")).validation()?;
    }
    if let Some(e) = eval {
        if let Some(k) = &e.k_list {
            let ks = parse_list::<usize>(k).validation()?;
            b.set(&format!("eval.rank_ks={ks:?}")).validation()?;
        }
        if let Some(t) = &e.thresholds {
            let ts = parse_list::<f64>(t).validation()?;
            b.set(&format!("eval.thresholds={ts:?}")).validation()?;
        }
    }
    b.build().validation()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = resolve(&common, None, None, None)?;
            commands::synth(&cfg, &out)
        }
        Command::Train {
            common,
            corpus,
            val,
            checkpoint,
            out,
        } => {
            let cfg = resolve(&common, checkpoint.as_deref(), None, None)?;
            commands::train(&cfg, &corpus, val.as_deref(), checkpoint.as_deref(), &out)
        }
        Command::Eval {
            common,
            eval,
            mode,
            out,
        } => {
            let cfg = resolve(&common, eval.checkpoint.as_deref(), Some(&eval), mode)?;
            commands::eval(&cfg, &eval.corpus, eval.split, eval.checkpoint.as_deref(), out.as_deref()).map(drop)
        }
        Command::Predict {
            common,
            eval,
            mode,
            question_id,
            top,
        } => {
            let cfg = resolve(&common, eval.checkpoint.as_deref(), Some(&eval), mode)?;
            commands::predict(
                &cfg,
                &eval.corpus,
                eval.split,
                eval.checkpoint.as_deref(),
                &question_id,
                top,
            )
            .map(drop)
        }
        Command::Compare { common, eval, out } => {
            let cfg = resolve(&common, eval.checkpoint.as_deref(), Some(&eval), None)?;
            commands::compare(&cfg, &eval.corpus, eval.split, eval.checkpoint.as_deref(), out.as_deref()).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
