//! Dataset commands: synthetic data generation and the semantic-relation
//! split builder.

use crate::context::{load_corpus, write_artifact};
use crate::Ctx;
use anyhow::{Context, Result};
use relmatch_core::corpus::{synth_corpus, SynthCorpusConfig};
use relmatch_core::visenc::{feature_file_name, save_features};
use relmatch_core::vrrsplit::{build_split, PredicateList};
use serde::Serialize;
use std::io::Write;
use std::path::Path;

pub fn synth_data(ctx: &Ctx, pairs: usize, noise: f64) -> Result<()> {
    let config = &ctx.config;
    let data = synth_corpus(
        config.seed,
        SynthCorpusConfig {
            pairs,
            regions: config.k.min(8),
            relations: config.m.min(6),
            region_dim: config.d_v,
            relation_dim: config.d_r,
            noise,
        },
    );

    std::fs::create_dir_all(&ctx.out)?;
    let captions_path = ctx.out.join("captions.jsonl");
    data.corpus.save_jsonl(&captions_path)?;

    let features_dir = ctx.out.join("features");
    std::fs::create_dir_all(&features_dir)?;
    for set in &data.features {
        save_features(set, &features_dir.join(feature_file_name(set.image_id)))?;
    }

    let labels_path = ctx.out.join("relation_labels.txt");
    let mut labels = std::io::BufWriter::new(
        std::fs::File::create(&labels_path)
            .with_context(|| format!("writing {}", labels_path.display()))?,
    );
    for label in &data.relation_labels {
        writeln!(labels, "{label}")?;
    }
    labels.flush()?;

    #[derive(Serialize)]
    struct SynthMeta {
        pairs: usize,
        noise: f64,
        regions: usize,
        relations: usize,
        region_dim: usize,
        relation_dim: usize,
    }
    write_artifact(
        &ctx.out,
        "synth_meta.json",
        config,
        SynthMeta {
            pairs,
            noise,
            regions: config.k.min(8),
            relations: config.m.min(6),
            region_dim: config.d_v,
            relation_dim: config.d_r,
        },
    )?;
    println!("captions: {}", captions_path.display());
    println!("features: {}", features_dir.display());
    println!("relation labels: {}", labels_path.display());
    Ok(())
}

pub fn build_vrr_split(ctx: &Ctx, captions: &Path, predicates: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(captions)?;
    let list = match predicates {
        Some(path) => PredicateList::load(path)?,
        None => PredicateList::packaged(),
    };
    let split = build_split(&corpus, &list, ctx.config.seed)?;
    let summary = split.summary();

    std::fs::create_dir_all(&ctx.out)?;
    let split_path = ctx.out.join("vrr_split.jsonl");
    split.save_jsonl(&split_path)?;

    #[derive(Serialize)]
    struct SplitSummary {
        predicate_count: usize,
        corpus_images: usize,
        qualifying_images: usize,
        predicate_histogram: std::collections::BTreeMap<String, usize>,
    }
    let summary_path = write_artifact(
        &ctx.out,
        "vrr_summary.json",
        &ctx.config,
        SplitSummary {
            predicate_count: list.len(),
            corpus_images: corpus.len(),
            qualifying_images: summary.image_count,
            predicate_histogram: summary.predicate_histogram,
        },
    )?;
    println!(
        "{} of {} images have a caption matching one of {} predicates",
        summary.image_count,
        corpus.len(),
        list.len()
    );
    println!("split: {}", split_path.display());
    println!("summary: {}", summary_path.display());
    Ok(())
}
