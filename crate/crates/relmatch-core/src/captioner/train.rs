//! Cross-entropy training and self-critical fine-tuning of the captioner.

use super::graph::{
    decode_greedy, prepare_visual, sample_rollout, step_on_tape, xe_loss_on_tape, DecoderState,
};
use super::CaptionerParams;
use crate::corpus::Corpus;
use crate::diffcore::{AdamConfig, AdamState, Array, Tape};
use crate::error::{Error, Result};
use crate::metrics::{cider_d, CiderModel};
use crate::params::ParamBindings;
use crate::textenc::{tokenize, truncate_tokens, Vocabulary};
use crate::visenc::VisualFeatureSet;
use rand::seq::SliceRandom;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptionerTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CaptionerTrainConfig {
    fn default() -> Self {
        CaptionerTrainConfig {
            learning_rate: 5e-4,
            epochs: 30,
            batch_size: 32,
            max_len: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct XeTrainOutcome {
    pub loss_curve: Vec<f64>,
    pub steps: u64,
}

/// Wrap caption tokens as `[<bos>, w.., <eos>]` ids against the vocabulary.
pub(crate) fn caption_to_ids(
    caption: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<usize>> {
    let tokens = tokenize(caption)?;
    let ids = vocab.encode(&tokens);
    let ids = truncate_tokens(&ids, max_len, 0);
    let mut out = Vec::with_capacity(ids.len() + 2);
    out.push(Vocabulary::BOS_ID);
    out.extend_from_slice(ids);
    out.push(Vocabulary::EOS_ID);
    Ok(out)
}

/// Teacher-forced training over all (image, caption) pairs.
pub fn train_captioner(
    params: &mut CaptionerParams,
    corpus: &Corpus,
    features_by_id: &HashMap<u64, VisualFeatureSet>,
    vocab: &Vocabulary,
    config: &CaptionerTrainConfig,
) -> Result<XeTrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut items = Vec::new();
    for entry in &corpus.entries {
        let features = features_by_id
            .get(&entry.image_id)
            .ok_or(Error::MissingFeatures {
                image_id: entry.image_id,
            })?;
        for caption in &entry.captions {
            items.push((features, caption_to_ids(caption, vocab, config.max_len)?));
        }
    }

    let mut adam = AdamState::new(AdamConfig::with_learning_rate(config.learning_rate));
    let mut outcome = XeTrainOutcome::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = crate::rng::substream_indexed(config.seed, "captioner-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut tape = Tape::new();
            let mut reg = ParamBindings::new();
            let nodes = params.bind(&mut tape, &mut reg);
            let mut losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let (features, ids) = &items[idx];
                let visual = prepare_visual(&mut tape, &nodes, features)?;
                losses.push(xe_loss_on_tape(&mut tape, &nodes, &visual, ids)?);
            }
            let stacked = tape.concat_rows(&losses)?;
            let loss = tape.mean(stacked)?;
            outcome.loss_curve.push(tape.value(loss).scalar_value());
            tape.backward(loss)?;
            let grads = reg.gradients(&tape);
            adam.step(params.named_mut(), &grads)?;
            outcome.steps += 1;
        }
    }
    Ok(outcome)
}

/// Gradients of the self-critical surrogate for one sampled caption:
/// `-advantage * sum_t log p(sampled_t)`. With a zero advantage every
/// parameter gradient is exactly zero.
pub fn policy_gradient(
    params: &CaptionerParams,
    features: &VisualFeatureSet,
    sampled_with_eos: &[usize],
    advantage: f64,
) -> Result<(f64, HashMap<String, Array>)> {
    let mut tape = Tape::new();
    let mut reg = ParamBindings::new();
    let nodes = params.bind(&mut tape, &mut reg);
    let visual = prepare_visual(&mut tape, &nodes, features)?;
    let mut state = DecoderState::initial(&mut tape, nodes.hidden);
    let mut picked = Vec::with_capacity(sampled_with_eos.len());
    let mut prev = Vocabulary::BOS_ID;
    for &token in sampled_with_eos {
        let out = step_on_tape(&mut tape, &nodes, &state, prev, &visual)?;
        state = out.state;
        picked.push(tape.slice_rows(out.log_probs, token, 1)?);
        prev = token;
    }
    let stacked = tape.concat_rows(&picked)?;
    let total = tape.sum(stacked)?;
    let loss = tape.scale(total, -advantage)?;
    let value = tape.value(loss).scalar_value();
    tape.backward(loss)?;
    Ok((value, reg.gradients(&tape)))
}

/// References and consensus model for reward computation.
pub struct ScstConfig {
    pub max_len: usize,
    pub learning_rate: f64,
}

impl Default for ScstConfig {
    fn default() -> Self {
        ScstConfig {
            max_len: 20,
            learning_rate: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScstOutcome {
    pub sampled_tokens: Vec<usize>,
    pub greedy_tokens: Vec<usize>,
    pub sample_reward: f64,
    pub greedy_reward: f64,
    pub advantage: f64,
    pub surrogate_loss: f64,
    pub grads: HashMap<String, Array>,
}

/// Reward stats over a batch of self-critical steps.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct ScstStats {
    pub mean_sample_reward: f64,
    pub mean_greedy_reward: f64,
    pub mean_advantage: f64,
}

fn reward_of(tokens: &[usize], vocab: &Vocabulary, refs: &[Vec<String>], model: &CiderModel) -> Result<f64> {
    let words: Vec<String> = tokens
        .iter()
        .filter(|&&t| t != Vocabulary::EOS_ID)
        .map(|&t| vocab.token(t).map(str::to_string))
        .collect::<Result<_>>()?;
    Ok(cider_d(&words, refs, model))
}

/// One self-critical step for one image: sample a caption, score it and the
/// greedy baseline with the consensus metric, and form the policy gradient
/// scaled by the advantage.
pub fn scst_step(
    params: &CaptionerParams,
    features: &VisualFeatureSet,
    references: &[Vec<String>],
    model: &CiderModel,
    vocab: &Vocabulary,
    rng: &mut impl rand::Rng,
    config: &ScstConfig,
) -> Result<ScstOutcome> {
    if references.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let sampled = sample_rollout(features, params, rng, config.max_len)?;
    let (greedy, _) = decode_greedy(features, params, config.max_len)?;
    let sample_reward = reward_of(&sampled, vocab, references, model)?;
    let greedy_reward = reward_of(&greedy, vocab, references, model)?;
    let advantage = sample_reward - greedy_reward;
    let (surrogate_loss, grads) = policy_gradient(params, features, &sampled, advantage)?;
    Ok(ScstOutcome {
        sampled_tokens: sampled,
        greedy_tokens: greedy,
        sample_reward,
        greedy_reward,
        advantage,
        surrogate_loss,
        grads,
    })
}

/// Self-critical fine-tuning loop: one sampled rollout per image per step,
/// gradients applied per image.
pub fn scst_finetune(
    params: &mut CaptionerParams,
    corpus: &Corpus,
    features_by_id: &HashMap<u64, VisualFeatureSet>,
    vocab: &Vocabulary,
    steps: usize,
    seed: u64,
    config: &ScstConfig,
) -> Result<Vec<ScstStats>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut refs_per_image = Vec::with_capacity(corpus.len());
    for entry in &corpus.entries {
        let refs: Vec<Vec<String>> = entry
            .captions
            .iter()
            .map(|c| tokenize(c))
            .collect::<Result<_>>()?;
        refs_per_image.push(refs);
    }
    let model = CiderModel::from_references(&refs_per_image)?;
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(config.learning_rate));
    let mut stats = Vec::with_capacity(steps);
    let mut rng = crate::rng::substream(seed, "scst-sampling");

    for _ in 0..steps {
        let mut stat = ScstStats::default();
        for (entry, refs) in corpus.entries.iter().zip(&refs_per_image) {
            let features = features_by_id
                .get(&entry.image_id)
                .ok_or(Error::MissingFeatures {
                    image_id: entry.image_id,
                })?;
            let outcome = scst_step(params, features, refs, &model, vocab, &mut rng, config)?;
            stat.mean_sample_reward += outcome.sample_reward;
            stat.mean_greedy_reward += outcome.greedy_reward;
            stat.mean_advantage += outcome.advantage;
            adam.step(params.named_mut(), &outcome.grads)?;
        }
        let n = corpus.len() as f64;
        stat.mean_sample_reward /= n;
        stat.mean_greedy_reward /= n;
        stat.mean_advantage /= n;
        stats.push(stat);
    }
    Ok(stats)
}
