//! `relmatch`: train and evaluate the relation-aware image-text matcher and
//! the relation-based captioner on precomputed region/relation features.

mod captioning;
mod context;
mod data;
mod matching;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "relmatch", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the matcher on a paired caption/feature dataset.
    TrainMatcher {
        #[command(flatten)]
        common: CommonArgs,
        /// JSON-lines caption corpus: {"image_id", "captions": [..]}.
        #[arg(long)]
        captions: PathBuf,
        /// Directory of per-image `<id>.rsgf` feature files.
        #[arg(long)]
        features_dir: PathBuf,
    },
    /// Evaluate bi-directional retrieval from a matcher checkpoint.
    EvalRetrieval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        features_dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of equal consecutive folds to average over.
        #[arg(long, default_value_t = 1)]
        folds: usize,
        /// Comma-separated recall cutoffs.
        #[arg(long, default_value = "1,5,10")]
        k: String,
    },
    /// Train the captioner with teacher forcing.
    TrainCaptioner {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        features_dir: PathBuf,
    },
    /// Decode captions for every image of a corpus.
    Caption {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        features_dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Beam width; 1 is greedy.
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Self-critical fine-tuning of a captioner checkpoint.
    ScstFinetune {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        features_dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the configured number of fine-tuning steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Build the semantic-relation caption split from a corpus.
    BuildVrrSplit {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        captions: PathBuf,
        /// Custom predicate list (one phrase per line); the packaged
        /// 164-phrase list applies when omitted.
        #[arg(long)]
        predicates: Option<PathBuf>,
    },
    /// Generate a synthetic planted caption/feature dataset.
    SynthData {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of (image, caption) pairs.
        #[arg(long, default_value_t = 32)]
        pairs: usize,
        /// Noise on planted feature rows.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Finite-difference check of matcher and captioner gradients.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Relative tolerance.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train and evaluate once per softmax temperature.
    SweepTemperature {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        features_dir: PathBuf,
        /// Validation corpus; the training corpus is reused when omitted.
        #[arg(long)]
        val_captions: Option<PathBuf>,
        /// Comma-separated temperatures applied to both attention stacks.
        #[arg(long, default_value = "4,6,9,12")]
        lambdas: String,
    },
}

fn init_thread_pool() -> Result<()> {
    if let Ok(raw) = std::env::var("RELMATCH_THREADS") {
        let threads: usize = raw
            .parse()
            .with_context(|| format!("RELMATCH_THREADS must be a positive integer, got {raw:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("initializing the worker pool")?;
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    init_thread_pool()?;
    let cli = Cli::parse();
    match cli.command {
        Command::TrainMatcher {
            common,
            captions,
            features_dir,
        } => matching::train_matcher(&common.into_ctx()?, &captions, &features_dir),
        Command::EvalRetrieval {
            common,
            captions,
            features_dir,
            checkpoint,
            folds,
            k,
        } => matching::eval_retrieval(
            &common.into_ctx()?,
            &captions,
            &features_dir,
            &checkpoint,
            folds,
            &k,
        ),
        Command::TrainCaptioner {
            common,
            captions,
            features_dir,
        } => captioning::train_captioner(&common.into_ctx()?, &captions, &features_dir),
        Command::Caption {
            common,
            captions,
            features_dir,
            checkpoint,
            beam,
        } => captioning::caption(&common.into_ctx()?, &captions, &features_dir, &checkpoint, beam),
        Command::ScstFinetune {
            common,
            captions,
            features_dir,
            checkpoint,
            steps,
        } => captioning::scst_finetune(
            &common.into_ctx()?,
            &captions,
            &features_dir,
            &checkpoint,
            steps,
        ),
        Command::BuildVrrSplit {
            common,
            captions,
            predicates,
        } => data::build_vrr_split(&common.into_ctx()?, &captions, predicates.as_deref()),
        Command::SynthData {
            common,
            pairs,
            noise,
        } => data::synth_data(&common.into_ctx()?, pairs, noise),
        Command::Gradcheck { common, tol } => matching::gradcheck(&common.into_ctx()?, tol),
        Command::SweepTemperature {
            common,
            captions,
            features_dir,
            val_captions,
            lambdas,
        } => matching::sweep_temperature(
            &common.into_ctx()?,
            &captions,
            &features_dir,
            val_captions.as_deref(),
            &lambdas,
        ),
    }
}

/// Resolved invocation context shared by every command.
pub struct Ctx {
    pub config: relmatch_core::config::RunConfig,
    pub out: PathBuf,
}

impl CommonArgs {
    fn into_ctx(self) -> Result<Ctx> {
        Ok(Ctx {
            config: context::resolve_config(self.config.as_deref(), self.seed)?,
            out: self.out,
        })
    }
}
