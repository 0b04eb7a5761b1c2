//! Hardest-negative triplet loss and the matcher training loop.

use super::{similarity_on_tape, MatcherHyper, MatcherNodes, MatcherParams};
use crate::corpus::Corpus;
use crate::diffcore::{AdamConfig, AdamState, Array, NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::ParamBindings;
use crate::textenc::{encode_on_tape, truncate_tokens, Vocabulary};
use crate::visenc::{project_on_tape, VisualFeatureSet};
use rand::seq::SliceRandom;
use std::collections::HashMap;

/// One positive (image, caption) pair of a batch.
pub struct PairItem<'a> {
    pub image_id: u64,
    pub features: &'a VisualFeatureSet,
    pub token_ids: &'a [usize],
}

/// Indices of the hardest negatives for one positive pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HardestNegatives {
    /// Hardest mismatched caption for the pair's image.
    pub caption: usize,
    /// Hardest mismatched image for the pair's caption.
    pub image: usize,
}

/// Full similarity grid of a batch on one tape: `grid[i][j] = sim(V_i, T_j)`.
/// Each caption is encoded once and each image projected once.
pub fn batch_grid_on_tape(
    tape: &mut Tape,
    nodes: &MatcherNodes,
    batch: &[PairItem<'_>],
    hyper: &MatcherHyper,
) -> Result<Vec<Vec<NodeId>>> {
    let mut encodings = Vec::with_capacity(batch.len());
    for item in batch {
        encodings.push(encode_on_tape(tape, &nodes.text, item.token_ids)?);
    }
    let mut projections = Vec::with_capacity(batch.len());
    for item in batch {
        projections.push(project_on_tape(tape, &nodes.visual, item.features)?);
    }
    let mut grid = Vec::with_capacity(batch.len());
    for projected in &projections {
        let mut row = Vec::with_capacity(batch.len());
        for words in &encodings {
            let sim = similarity_on_tape(tape, &nodes.gates, projected, words, hyper)?;
            row.push(sim.sim);
        }
        grid.push(row);
    }
    Ok(grid)
}

/// Hardest negatives per positive pair, from similarity values.
///
/// Candidates sharing the anchor's image id are never negatives (an image's
/// other gold captions must not be pushed away). Ties break to the lowest
/// index.
pub fn hardest_negatives(grid: &Array, image_ids: &[u64]) -> Result<Vec<HardestNegatives>> {
    let n = image_ids.len();
    if n < 2 {
        return Err(Error::BatchTooSmall { got: n });
    }
    debug_assert_eq!(grid.shape(), &[n, n]);
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let mut caption: Option<(usize, f64)> = None;
        let mut image: Option<(usize, f64)> = None;
        for c in 0..n {
            if image_ids[c] == image_ids[p] {
                continue;
            }
            let sim_caption = grid.at(p, c); // sim(V_p, T_c)
            if caption.map_or(true, |(_, best)| sim_caption > best) {
                caption = Some((c, sim_caption));
            }
            let sim_image = grid.at(c, p); // sim(V_c, T_p)
            if image.map_or(true, |(_, best)| sim_image > best) {
                image = Some((c, sim_image));
            }
        }
        let (Some((caption, _)), Some((image, _))) = (caption, image) else {
            return Err(Error::BatchTooSmall { got: 1 });
        };
        out.push(HardestNegatives { caption, image });
    }
    Ok(out)
}

/// Triplet hinge loss over the grid nodes, given chosen negatives:
/// `sum_p [margin - s_pp + s(V_p, T_neg)]_+ + [margin - s_pp + s(V_neg, T_p)]_+`.
pub fn triplet_loss_on_tape(
    tape: &mut Tape,
    grid: &[Vec<NodeId>],
    negatives: &[HardestNegatives],
    margin: f64,
) -> Result<NodeId> {
    let mut hinges = Vec::with_capacity(2 * negatives.len());
    for (p, neg) in negatives.iter().enumerate() {
        let positive = grid[p][p];
        for &negative in &[grid[p][neg.caption], grid[neg.image][p]] {
            let diff = tape.sub(negative, positive)?;
            let shifted = tape.add_scalar(diff, margin)?;
            hinges.push(tape.relu(shifted)?);
        }
    }
    let stacked = tape.concat_rows(&hinges)?;
    tape.sum(stacked)
}

/// Plain-value version of the loss for a precomputed similarity grid.
pub fn triplet_loss_from_grid(grid: &Array, image_ids: &[u64], margin: f64) -> Result<f64> {
    let negatives = hardest_negatives(grid, image_ids)?;
    let mut loss = 0.0;
    // association matches the tape assembly: (neg - pos) + margin
    for (p, neg) in negatives.iter().enumerate() {
        let positive = grid.at(p, p);
        loss += (grid.at(p, neg.caption) - positive + margin).max(0.0);
        loss += (grid.at(neg.image, p) - positive + margin).max(0.0);
    }
    Ok(loss)
}

/// Hardest-negative triplet loss of a batch of positive pairs.
pub fn triplet_loss_hardest(
    batch: &[PairItem<'_>],
    params: &MatcherParams,
    hyper: &MatcherHyper,
) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall { got: batch.len() });
    }
    let mut tape = Tape::new();
    let mut reg = ParamBindings::new();
    let nodes = params.bind(&mut tape, &mut reg);
    let (loss, _) = batch_loss_on_tape(&mut tape, &nodes, batch, hyper)?;
    Ok(tape.value(loss).scalar_value())
}

/// Grid + hardest negatives + hinge assembly on one tape. Returns the loss
/// node and the grid values.
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    nodes: &MatcherNodes,
    batch: &[PairItem<'_>],
    hyper: &MatcherHyper,
) -> Result<(NodeId, Array)> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall { got: batch.len() });
    }
    let grid_nodes = batch_grid_on_tape(tape, nodes, batch, hyper)?;
    let n = batch.len();
    let mut grid = Array::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            grid.data_mut()[i * n + j] = tape.value(grid_nodes[i][j]).scalar_value();
        }
    }
    let image_ids: Vec<u64> = batch.iter().map(|b| b.image_id).collect();
    let negatives = hardest_negatives(&grid, &image_ids)?;
    let loss = triplet_loss_on_tape(tape, &grid_nodes, &negatives, hyper.margin)?;
    Ok((loss, grid))
}

/// Two-phase Adam schedule and batching for matcher training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatcherTrainConfig {
    pub learning_rate_1: f64,
    pub epochs_1: usize,
    pub learning_rate_2: f64,
    pub epochs_2: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for MatcherTrainConfig {
    fn default() -> Self {
        MatcherTrainConfig {
            learning_rate_1: 5e-4,
            epochs_1: 10,
            learning_rate_2: 5e-5,
            epochs_2: 10,
            batch_size: 128,
            max_len: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    /// Loss per optimizer step.
    pub loss_curve: Vec<f64>,
    pub steps: u64,
}

/// Train the matcher in place over a paired corpus.
///
/// Pairs are shuffled per epoch from the `shuffle` substream; trailing
/// batches of size 1 are skipped (the loss needs in-batch negatives).
pub fn train_matcher(
    params: &mut MatcherParams,
    hyper: &MatcherHyper,
    corpus: &Corpus,
    features_by_id: &HashMap<u64, VisualFeatureSet>,
    vocab: &Vocabulary,
    config: &MatcherTrainConfig,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    hyper.validate()?;
    let pairs = corpus.tokenized_pairs(vocab)?;
    for pair in &pairs {
        if !features_by_id.contains_key(&pair.image_id) {
            return Err(Error::MissingFeatures {
                image_id: pair.image_id,
            });
        }
    }

    let mut adam = AdamState::new(AdamConfig::with_learning_rate(config.learning_rate_1));
    let mut outcome = TrainOutcome::default();
    let total_epochs = config.epochs_1 + config.epochs_2;
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 0..total_epochs {
        adam.config.learning_rate = if epoch < config.epochs_1 {
            config.learning_rate_1
        } else {
            config.learning_rate_2
        };
        let mut rng = crate::rng::substream_indexed(config.seed, "shuffle", epoch as u64);
        order.shuffle(&mut rng);

        for chunk in order.chunks(config.batch_size.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<PairItem<'_>> = chunk
                .iter()
                .map(|&idx| {
                    let pair = &pairs[idx];
                    PairItem {
                        image_id: pair.image_id,
                        features: &features_by_id[&pair.image_id],
                        token_ids: truncate_tokens(&pair.token_ids, config.max_len, pair.image_id),
                    }
                })
                .collect();

            let mut tape = Tape::new();
            let mut reg = ParamBindings::new();
            let nodes = params.bind(&mut tape, &mut reg);
            let (loss, _) = batch_loss_on_tape(&mut tape, &nodes, &batch, hyper)?;
            outcome.loss_curve.push(tape.value(loss).scalar_value());
            tape.backward(loss)?;
            let grads = reg.gradients(&tape);
            adam.step(params.named_mut(), &grads)?;
            outcome.steps += 1;
        }
        log::info!(
            "matcher epoch {epoch}: mean step loss {:.6}",
            mean_tail(&outcome.loss_curve, pairs.len() / config.batch_size.max(1) + 1)
        );
    }
    Ok(outcome)
}

fn mean_tail(values: &[f64], count: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(count.max(1))..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}
