//! Bi-directional recall@K over a similarity grid and the fold-averaged
//! retrieval evaluation driven by the matcher.

use crate::corpus::Corpus;
use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::matcher::{similarity, MatcherHyper, MatcherParams};
use crate::textenc::{encode_text, truncate_tokens, EncodeOptions, Vocabulary};
use crate::visenc::{project, ProjectedVisual, VisualFeatureSet};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Image retrieval from a caption query; one gold image per caption.
    TextToImage,
    /// Caption retrieval from an image query; any gold caption is a hit.
    ImageToText,
}

/// 1-based rank of the gold candidate under descending score with ties
/// broken by lower candidate index.
fn rank_of(scores: impl Iterator<Item = f64> + Clone, gold: usize) -> usize {
    let gold_score = scores.clone().nth(gold).expect("gold index in range");
    let mut rank = 1;
    for (idx, score) in scores.enumerate() {
        if idx == gold {
            continue;
        }
        if score > gold_score || (score == gold_score && idx < gold) {
            rank += 1;
        }
    }
    rank
}

/// Gold rank per query in the given direction. `caption_to_image[j]` is the
/// image index of caption `j`.
pub fn gold_ranks(grid: &Array, caption_to_image: &[usize], direction: Direction) -> Vec<usize> {
    let (n_images, n_captions) = (grid.shape()[0], grid.shape()[1]);
    debug_assert_eq!(caption_to_image.len(), n_captions);
    match direction {
        Direction::TextToImage => (0..n_captions)
            .map(|j| {
                let column = (0..n_images).map(|i| grid.at(i, j));
                rank_of(column, caption_to_image[j])
            })
            .collect(),
        Direction::ImageToText => (0..n_images)
            .map(|i| {
                let row = (0..n_captions).map(|j| grid.at(i, j));
                caption_to_image
                    .iter()
                    .enumerate()
                    .filter(|(_, &img)| img == i)
                    .map(|(j, _)| rank_of(row.clone(), j))
                    .min()
                    .expect("every image needs at least one gold caption")
            })
            .collect(),
    }
}

/// Fraction of queries whose gold candidate ranks within the top K.
pub fn recall_at_k(
    grid: &Array,
    caption_to_image: &[usize],
    k: usize,
    direction: Direction,
) -> Result<f64> {
    let candidates = match direction {
        Direction::TextToImage => grid.shape()[0],
        Direction::ImageToText => grid.shape()[1],
    };
    if k == 0 || k > candidates {
        return Err(Error::RecallCutoff { k, candidates });
    }
    let ranks = gold_ranks(grid, caption_to_image, direction);
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

fn median(mut values: Vec<usize>) -> f64 {
    values.sort_unstable();
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionMetrics {
    /// recall@K per cutoff.
    pub recall: BTreeMap<usize, f64>,
    pub median_rank: f64,
}

fn direction_metrics(
    grid: &Array,
    caption_to_image: &[usize],
    ks: &[usize],
    direction: Direction,
) -> Result<DirectionMetrics> {
    let ranks = gold_ranks(grid, caption_to_image, direction);
    let mut recall = BTreeMap::new();
    for &k in ks {
        let candidates = match direction {
            Direction::TextToImage => grid.shape()[0],
            Direction::ImageToText => grid.shape()[1],
        };
        if k == 0 || k > candidates {
            return Err(Error::RecallCutoff { k, candidates });
        }
        let hits = ranks.iter().filter(|&&r| r <= k).count() as f64;
        recall.insert(k, hits / ranks.len() as f64);
    }
    Ok(DirectionMetrics {
        recall,
        median_rank: median(ranks),
    })
}

/// Metrics of one fold, with the similarity grid kept for inspection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub image_count: usize,
    pub caption_count: usize,
    pub text_to_image: DirectionMetrics,
    pub image_to_text: DirectionMetrics,
    #[serde(skip)]
    pub grid: Array,
}

impl RetrievalResult {
    pub fn from_grid(grid: Array, caption_to_image: &[usize], ks: &[usize]) -> Result<Self> {
        Ok(RetrievalResult {
            image_count: grid.shape()[0],
            caption_count: grid.shape()[1],
            text_to_image: direction_metrics(&grid, caption_to_image, ks, Direction::TextToImage)?,
            image_to_text: direction_metrics(&grid, caption_to_image, ks, Direction::ImageToText)?,
            grid,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub folds: Vec<RetrievalResult>,
    pub mean_text_to_image: DirectionMetrics,
    pub mean_image_to_text: DirectionMetrics,
}

fn mean_direction(per_fold: Vec<&DirectionMetrics>) -> DirectionMetrics {
    let count = per_fold.len() as f64;
    let mut recall: BTreeMap<usize, f64> = BTreeMap::new();
    for metrics in &per_fold {
        for (&k, &v) in &metrics.recall {
            *recall.entry(k).or_insert(0.0) += v;
        }
    }
    for v in recall.values_mut() {
        *v /= count;
    }
    DirectionMetrics {
        recall,
        median_rank: per_fold.iter().map(|m| m.median_rank).sum::<f64>() / count,
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub folds: usize,
    pub recall_ks: Vec<usize>,
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: 1,
            recall_ks: vec![1, 5, 10],
            max_len: 64,
        }
    }
}

/// Similarity grid between a set of projected images and tokenized captions.
/// Each caption is encoded once; cells are independent and run in parallel.
pub fn similarity_grid(
    params: &MatcherParams,
    hyper: &MatcherHyper,
    projected: &[ProjectedVisual],
    captions: &[Vec<usize>],
    max_len: usize,
) -> Result<Array> {
    let columns: Vec<Vec<f64>> = captions
        .par_iter()
        .enumerate()
        .map(|(j, token_ids)| -> Result<Vec<f64>> {
            let ids = truncate_tokens(token_ids, max_len, j as u64);
            let encoding = encode_text(ids, &params.text, j as u64, EncodeOptions { max_len })?;
            projected
                .iter()
                .map(|p| similarity(p, &encoding, params, hyper).map(|(s, _)| s))
                .collect()
        })
        .collect::<Result<_>>()?;
    let (n_images, n_captions) = (projected.len(), captions.len());
    let mut grid = Array::zeros(&[n_images, n_captions]);
    for (j, column) in columns.iter().enumerate() {
        for (i, &value) in column.iter().enumerate() {
            grid.data_mut()[i * n_captions + j] = value;
        }
    }
    Ok(grid)
}

/// Retrieval evaluation over equal consecutive folds of the corpus, with
/// metrics averaged across folds.
pub fn eval_retrieval(
    params: &MatcherParams,
    hyper: &MatcherHyper,
    corpus: &Corpus,
    features_by_id: &HashMap<u64, VisualFeatureSet>,
    vocab: &Vocabulary,
    config: &EvalConfig,
) -> Result<RetrievalReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = corpus.len();
    if config.folds == 0 || n % config.folds != 0 {
        return Err(Error::UnevenFolds {
            count: n,
            folds: config.folds,
        });
    }
    let fold_size = n / config.folds;
    let mut folds = Vec::with_capacity(config.folds);
    for fold in corpus.entries.chunks(fold_size) {
        let mut projected = Vec::with_capacity(fold.len());
        for entry in fold {
            let features = features_by_id
                .get(&entry.image_id)
                .ok_or(Error::MissingFeatures {
                    image_id: entry.image_id,
                })?;
            projected.push(project(features, &params.visual)?);
        }
        let mut captions = Vec::new();
        let mut caption_to_image = Vec::new();
        for (i, entry) in fold.iter().enumerate() {
            for caption in &entry.captions {
                let tokens = crate::textenc::tokenize(caption)?;
                captions.push(vocab.encode(&tokens));
                caption_to_image.push(i);
            }
        }
        let grid = similarity_grid(params, hyper, &projected, &captions, config.max_len)?;
        folds.push(RetrievalResult::from_grid(
            grid,
            &caption_to_image,
            &config.recall_ks,
        )?);
    }
    let mean_text_to_image = mean_direction(folds.iter().map(|f| &f.text_to_image).collect());
    let mean_image_to_text = mean_direction(folds.iter().map(|f| &f.image_to_text).collect());
    Ok(RetrievalReport {
        folds,
        mean_text_to_image,
        mean_image_to_text,
    })
}

/// Aligned text table in the conventional r@1/r@5/r@10 layout.
pub fn format_table(report: &RetrievalReport) -> String {
    let ks: Vec<usize> = report.mean_text_to_image.recall.keys().copied().collect();
    let mut out = String::new();
    let header_cells: Vec<String> = ks.iter().map(|k| format!("r@{k}")).collect();
    out.push_str(&format!("{:<10}", ""));
    out.push_str(&format!(
        "{:>34}{:>34}\n",
        "text-to-image", "image-to-text"
    ));
    out.push_str(&format!("{:<10}", "fold"));
    for _ in 0..2 {
        for cell in &header_cells {
            out.push_str(&format!("{cell:>10}"));
        }
        out.push_str(&format!("{:>4}", ""));
    }
    out.push('\n');
    let row = |label: &str, t2i: &DirectionMetrics, i2t: &DirectionMetrics| -> String {
        let mut line = format!("{label:<10}");
        for dir in [t2i, i2t] {
            for k in &ks {
                line.push_str(&format!("{:>10.3}", dir.recall[k]));
            }
            line.push_str(&format!("{:>4}", ""));
        }
        line.push('\n');
        line
    };
    for (i, fold) in report.folds.iter().enumerate() {
        out.push_str(&row(
            &i.to_string(),
            &fold.text_to_image,
            &fold.image_to_text,
        ));
    }
    out.push_str(&row(
        "mean",
        &report.mean_text_to_image,
        &report.mean_image_to_text,
    ));
    out
}
