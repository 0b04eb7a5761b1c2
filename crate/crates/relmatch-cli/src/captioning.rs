//! Captioner commands: teacher-forced training, decoding, and self-critical
//! fine-tuning.

use crate::context::{
    load_captioner_checkpoint, load_corpus, load_features_for, save_captioner_checkpoint,
    write_artifact,
};
use crate::Ctx;
use anyhow::{Context, Result};
use relmatch_core::captioner::{self, CaptionerParams, CaptionerTrainConfig, ScstConfig};
use relmatch_core::rng::substream;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

pub fn train_captioner(ctx: &Ctx, captions: &Path, features_dir: &Path) -> Result<()> {
    let config = &ctx.config;
    let corpus = load_corpus(captions)?;
    let features = load_features_for(&corpus, features_dir, config)?;
    let vocab = corpus.build_vocabulary()?;

    let mut params = CaptionerParams::init(
        &config.captioner_config(vocab.len()),
        &mut substream(config.seed, "captioner-init"),
    );
    let outcome = captioner::train_captioner(
        &mut params,
        &corpus,
        &features,
        &vocab,
        &CaptionerTrainConfig {
            learning_rate: config.cap_lr,
            epochs: config.cap_epochs,
            batch_size: config.batch_size,
            max_len: config.max_len,
            seed: config.seed,
        },
    )?;

    std::fs::create_dir_all(&ctx.out)?;
    let checkpoint_path = ctx.out.join("captioner.rsck");
    save_captioner_checkpoint(&checkpoint_path, &params, config, &vocab)?;
    vocab.save(&ctx.out.join("vocab.txt"))?;

    #[derive(Serialize)]
    struct LossCurve {
        steps: u64,
        loss_per_step: Vec<f64>,
    }
    let curve_path = write_artifact(
        &ctx.out,
        "captioner_loss_curve.json",
        config,
        LossCurve {
            steps: outcome.steps,
            loss_per_step: outcome.loss_curve.clone(),
        },
    )?;
    println!(
        "trained {} steps, final loss {:.6}",
        outcome.steps,
        outcome.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", checkpoint_path.display());
    println!("loss curve: {}", curve_path.display());
    Ok(())
}

pub fn caption(
    ctx: &Ctx,
    captions: &Path,
    features_dir: &Path,
    checkpoint: &Path,
    beam: usize,
) -> Result<()> {
    let loaded = load_captioner_checkpoint(checkpoint)?;
    let mut config = loaded.config.clone();
    config.seed = ctx.config.seed;
    let corpus = load_corpus(captions)?;
    let features = load_features_for(&corpus, features_dir, &config)?;

    #[derive(Serialize)]
    struct CaptionRow<'a> {
        image_id: u64,
        caption: &'a str,
        log_prob: f64,
    }

    std::fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join("captions.jsonl");
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?,
    );
    for entry in &corpus.entries {
        let set = &features[&entry.image_id];
        let (tokens, log_prob) = if beam <= 1 {
            captioner::decode_greedy(set, &loaded.params, config.max_len)?
        } else {
            captioner::decode_beam(set, &loaded.params, beam, config.max_len)?
        };
        let words = loaded.vocab.decode(&tokens)?;
        let text = words.join(" ");
        serde_json::to_writer(
            &mut file,
            &CaptionRow {
                image_id: entry.image_id,
                caption: &text,
                log_prob,
            },
        )?;
        writeln!(file)?;
    }
    file.flush()?;
    println!("captions: {}", path.display());

    #[derive(Serialize)]
    struct CaptionMeta {
        beam: usize,
        images: usize,
    }
    write_artifact(
        &ctx.out,
        "captions_meta.json",
        &config,
        CaptionMeta {
            beam,
            images: corpus.len(),
        },
    )?;
    Ok(())
}

pub fn scst_finetune(
    ctx: &Ctx,
    captions: &Path,
    features_dir: &Path,
    checkpoint: &Path,
    steps: Option<usize>,
) -> Result<()> {
    let loaded = load_captioner_checkpoint(checkpoint)?;
    let mut config = loaded.config.clone();
    config.seed = ctx.config.seed;
    let corpus = load_corpus(captions)?;
    let features = load_features_for(&corpus, features_dir, &config)?;
    let steps = steps.unwrap_or(config.scst_steps);

    let mut params = loaded.params;
    let stats = captioner::scst_finetune(
        &mut params,
        &corpus,
        &features,
        &loaded.vocab,
        steps,
        config.seed,
        &ScstConfig {
            max_len: config.max_len,
            learning_rate: config.scst_lr,
        },
    )?;
    for (i, stat) in stats.iter().enumerate() {
        log::info!(
            "step {i}: sample reward {:.4}, greedy reward {:.4}",
            stat.mean_sample_reward,
            stat.mean_greedy_reward
        );
    }

    std::fs::create_dir_all(&ctx.out)?;
    let checkpoint_path = ctx.out.join("captioner_scst.rsck");
    save_captioner_checkpoint(&checkpoint_path, &params, &config, &loaded.vocab)?;

    #[derive(Serialize)]
    struct ScstReport {
        steps: usize,
        reward_stats: Vec<relmatch_core::captioner::ScstStats>,
    }
    let stats_path = write_artifact(
        &ctx.out,
        "scst_stats.json",
        &config,
        ScstReport {
            steps,
            reward_stats: stats,
        },
    )?;
    println!("checkpoint: {}", checkpoint_path.display());
    println!("reward stats: {}", stats_path.display());
    Ok(())
}
