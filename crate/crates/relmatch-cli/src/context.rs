//! Shared command plumbing: config resolution, dataset loading, artifact
//! writing, and checkpoint composition.

use anyhow::{bail, Context, Result};
use relmatch_core::checkpoint::{self, Checkpoint};
use relmatch_core::config::RunConfig;
use relmatch_core::corpus::Corpus;
use relmatch_core::diffcore::Array;
use relmatch_core::matcher::{MatcherHyper, MatcherParams};
use relmatch_core::textenc::Vocabulary;
use relmatch_core::visenc::{load_features, VisualFeatureSet};
use serde::Serialize;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Effective config: file (when given) + seed override from the flag.
pub fn resolve_config(config_path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = match config_path {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Every artifact embeds the tool version, the seed, and the verbatim
/// config echo, so a rerun with identical inputs is byte-identical.
#[derive(Serialize)]
pub struct Artifact<'a, T: Serialize> {
    pub version: &'a str,
    pub seed: u64,
    pub config: &'a str,
    pub data: T,
}

pub fn write_artifact<T: Serialize>(
    out_dir: &Path,
    name: &str,
    config: &RunConfig,
    data: T,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let path = out_dir.join(name);
    let echo = config.echo();
    let artifact = Artifact {
        version: VERSION,
        seed: config.seed,
        config: &echo,
        data,
    };
    let mut text = serde_json::to_string_pretty(&artifact)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let corpus =
        Corpus::load_jsonl(path).with_context(|| format!("loading captions {}", path.display()))?;
    if corpus.is_empty() {
        bail!("caption corpus {} is empty", path.display());
    }
    Ok(corpus)
}

/// Load `<image_id>.rsgf` for every corpus image, keeping the top-m
/// relations and top-k regions per the config.
pub fn load_features_for(
    corpus: &Corpus,
    features_dir: &Path,
    config: &RunConfig,
) -> Result<HashMap<u64, VisualFeatureSet>> {
    let mut features = HashMap::new();
    for entry in &corpus.entries {
        let path = features_dir.join(relmatch_core::visenc::feature_file_name(entry.image_id));
        let mut set = load_features(&path, config.m)
            .with_context(|| format!("loading features {}", path.display()))?;
        if set.region_count() > config.k {
            log::warn!(
                "image {}: {} regions, keeping the first {}",
                entry.image_id,
                set.region_count(),
                config.k
            );
            let d = set.region_dim();
            let data = set.regions.data()[..config.k * d].to_vec();
            set.regions = Array::from_vec(vec![config.k, d], data).expect("truncated regions");
        }
        features.insert(entry.image_id, set);
    }
    Ok(features)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

fn vocab_to_meta(vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for i in 0..vocab.len() {
        out.push_str(vocab.token(i).expect("dense vocabulary"));
        out.push('\n');
    }
    out
}

fn vocab_from_meta(text: &str) -> Result<Vocabulary> {
    let tokens: Vec<&str> = text.lines().collect();
    // specials come first in serialized vocabularies
    let rest = tokens.get(4..).unwrap_or_default();
    let vocab = Vocabulary::from_tokens(rest.iter().copied());
    if vocab.len() != tokens.len() {
        bail!("checkpoint vocabulary is malformed");
    }
    for (i, token) in tokens.iter().enumerate() {
        if vocab.token(i).map_err(anyhow::Error::from)? != *token {
            bail!("checkpoint vocabulary is not in canonical order");
        }
    }
    Ok(vocab)
}

pub fn save_matcher_checkpoint(
    path: &Path,
    params: &MatcherParams,
    config: &RunConfig,
    vocab: &Vocabulary,
) -> Result<()> {
    let checkpoint = Checkpoint {
        kind: "matcher".into(),
        seed: config.seed,
        meta: vec![
            ("config".into(), config.echo()),
            ("vocabulary".into(), vocab_to_meta(vocab)),
        ],
        arrays: params
            .named()
            .into_iter()
            .map(|(n, a)| (n, a.clone()))
            .collect(),
    };
    checkpoint::save(&checkpoint, path)
        .with_context(|| format!("writing checkpoint {}", path.display()))
}

pub struct LoadedMatcher {
    pub params: MatcherParams,
    pub hyper: MatcherHyper,
    pub config: RunConfig,
    pub vocab: Vocabulary,
}

pub fn load_matcher_checkpoint(path: &Path) -> Result<LoadedMatcher> {
    let checkpoint =
        checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    if checkpoint.kind != "matcher" {
        bail!("{} is a {:?} checkpoint, expected matcher", path.display(), checkpoint.kind);
    }
    let config = RunConfig::parse(
        checkpoint
            .meta_value("config")
            .context("checkpoint lacks a config echo")?,
    )?;
    let vocab = vocab_from_meta(
        checkpoint
            .meta_value("vocabulary")
            .context("checkpoint lacks a vocabulary")?,
    )?;
    let params = MatcherParams::from_named(checkpoint.arrays_by_name())?;
    let hyper = config.matcher_hyper();
    Ok(LoadedMatcher {
        params,
        hyper,
        config,
        vocab,
    })
}

pub fn save_captioner_checkpoint(
    path: &Path,
    params: &relmatch_core::captioner::CaptionerParams,
    config: &RunConfig,
    vocab: &Vocabulary,
) -> Result<()> {
    let checkpoint = Checkpoint {
        kind: "captioner".into(),
        seed: config.seed,
        meta: vec![
            ("config".into(), config.echo()),
            ("vocabulary".into(), vocab_to_meta(vocab)),
        ],
        arrays: params
            .named()
            .into_iter()
            .map(|(n, a)| (n, a.clone()))
            .collect(),
    };
    checkpoint::save(&checkpoint, path)
        .with_context(|| format!("writing checkpoint {}", path.display()))
}

pub struct LoadedCaptioner {
    pub params: relmatch_core::captioner::CaptionerParams,
    pub config: RunConfig,
    pub vocab: Vocabulary,
}

pub fn load_captioner_checkpoint(path: &Path) -> Result<LoadedCaptioner> {
    let checkpoint =
        checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    if checkpoint.kind != "captioner" {
        bail!("{} is a {:?} checkpoint, expected captioner", path.display(), checkpoint.kind);
    }
    let config = RunConfig::parse(
        checkpoint
            .meta_value("config")
            .context("checkpoint lacks a config echo")?,
    )?;
    let vocab = vocab_from_meta(
        checkpoint
            .meta_value("vocabulary")
            .context("checkpoint lacks a vocabulary")?,
    )?;
    let params = relmatch_core::captioner::CaptionerParams::from_named(checkpoint.arrays_by_name())?;
    Ok(LoadedCaptioner {
        params,
        config,
        vocab,
    })
}

/// Parse a comma-separated list of recall cutoffs.
pub fn parse_ks(raw: &str) -> Result<Vec<usize>> {
    let mut ks = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        ks.push(part.parse::<usize>().with_context(|| format!("bad recall cutoff {part:?}"))?);
    }
    if ks.is_empty() {
        bail!("no recall cutoffs given");
    }
    Ok(ks)
}
