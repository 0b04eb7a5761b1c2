//! The relation-aware cross-attention matcher: word-conditioned attention
//! over projected region and relation rows, a per-word fusion gate mixing
//! the two attended vectors, an importance gate calibrating each word's
//! contribution, and a hardest-negative triplet ranking loss.

mod similarity;
mod train;

pub use similarity::{
    attend, fuse, normalized_similarities, similarity, similarity_on_tape, AttentionTrace,
    GateNodes, SimilarityNodes, WordSimNodes, WordTrace,
};
pub use train::{
    batch_grid_on_tape, batch_loss_on_tape, hardest_negatives, train_matcher,
    triplet_loss_from_grid, triplet_loss_hardest, triplet_loss_on_tape, HardestNegatives,
    MatcherTrainConfig, PairItem, TrainOutcome,
};

use crate::diffcore::{Array, Tape};
use crate::error::{Error, Result};
use crate::params::ParamBindings;
use crate::textenc::{TextEncoderNodes, TextEncoderParams};
use crate::visenc::{VisualEncoderNodes, VisualEncoderParams};
use rand::Rng;

/// Non-trainable hyperparameters of the similarity head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatcherHyper {
    /// Softmax temperature over region similarities.
    pub lambda_regions: f64,
    /// Softmax temperature over relation similarities.
    pub lambda_relations: f64,
    /// Triplet ranking margin.
    pub margin: f64,
    /// Floor for every norm denominator.
    pub epsilon: f64,
}

impl Default for MatcherHyper {
    fn default() -> Self {
        MatcherHyper {
            lambda_regions: 9.0,
            lambda_relations: 9.0,
            margin: 0.2,
            epsilon: 1e-8,
        }
    }
}

impl MatcherHyper {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_regions <= 0.0 || self.lambda_relations <= 0.0 {
            return Err(Error::Config {
                line: 0,
                reason: "softmax temperatures must be positive".into(),
            });
        }
        if self.margin < 0.0 {
            return Err(Error::Config {
                line: 0,
                reason: "margin must be non-negative".into(),
            });
        }
        Ok(())
    }
}

/// All trainable state of the matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams {
    pub text: TextEncoderParams,
    pub visual: VisualEncoderParams,
    /// Fusion gate: mixes attended relation and region vectors per word.
    pub fusion_w: Array,
    pub fusion_b: Array,
    /// Importance gate: weights each word's similarity contribution.
    pub importance_w: Array,
    pub importance_b: Array,
}

impl MatcherParams {
    /// Gate biases start at zero so both gates open at 1/2 and neither
    /// modality dominates initially.
    pub fn init(
        vocab_size: usize,
        embed_dim: usize,
        joint_dim: usize,
        region_dim: usize,
        relation_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let gate_scale = (6.0 / (joint_dim + 1) as f64).sqrt();
        MatcherParams {
            text: TextEncoderParams::init(vocab_size, embed_dim, joint_dim, rng),
            visual: VisualEncoderParams::init(joint_dim, region_dim, relation_dim, rng),
            fusion_w: Array::uniform(&[joint_dim], -gate_scale, gate_scale, rng),
            fusion_b: Array::zeros(&[1]),
            importance_w: Array::uniform(&[joint_dim], -gate_scale, gate_scale, rng),
            importance_b: Array::zeros(&[1]),
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.text.hidden()
    }

    pub fn named(&self) -> Vec<(String, &Array)> {
        let mut out = self.text.named("text");
        out.extend(self.visual.named("visual"));
        out.push(("gate.fusion_w".to_string(), &self.fusion_w));
        out.push(("gate.fusion_b".to_string(), &self.fusion_b));
        out.push(("gate.importance_w".to_string(), &self.importance_w));
        out.push(("gate.importance_b".to_string(), &self.importance_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array)> {
        let mut out = self.text.named_mut("text");
        out.extend(self.visual.named_mut("visual"));
        out.push(("gate.fusion_w".to_string(), &mut self.fusion_w));
        out.push(("gate.fusion_b".to_string(), &mut self.fusion_b));
        out.push(("gate.importance_w".to_string(), &mut self.importance_w));
        out.push(("gate.importance_b".to_string(), &mut self.importance_b));
        out
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamBindings) -> MatcherNodes {
        MatcherNodes {
            text: self.text.bind(tape, reg, "text"),
            visual: self.visual.bind(tape, reg, "visual"),
            gates: GateNodes {
                fusion_w: reg.register(tape, "gate.fusion_w", &self.fusion_w),
                fusion_b: reg.register(tape, "gate.fusion_b", &self.fusion_b),
                importance_w: reg.register(tape, "gate.importance_w", &self.importance_w),
                importance_b: reg.register(tape, "gate.importance_b", &self.importance_b),
            },
        }
    }

    /// Rebuild from checkpointed named arrays.
    pub fn from_named(mut arrays: std::collections::HashMap<String, Array>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Array> {
            arrays.remove(name).ok_or_else(|| Error::Checkpoint {
                reason: format!("missing parameter {name}"),
            })
        };
        let embed = take("text.embed")?;
        let (vocab_size, embed_dim) = (embed.shape()[0], embed.shape()[1]);
        let mut text = TextEncoderParams::init(vocab_size, embed_dim, 1, &mut crate::rng::substream(0, "void"));
        text.embed = embed;
        for (name, slot) in text.forward.named_mut("text.fwd") {
            *slot = take(&name)?;
        }
        for (name, slot) in text.backward.named_mut("text.bwd") {
            *slot = take(&name)?;
        }
        let w_regions = take("visual.w_regions")?;
        let visual = VisualEncoderParams {
            b_regions: take("visual.b_regions")?,
            w_relations: take("visual.w_relations")?,
            b_relations: take("visual.b_relations")?,
            w_regions,
        };
        let params = MatcherParams {
            text,
            visual,
            fusion_w: take("gate.fusion_w")?,
            fusion_b: take("gate.fusion_b")?,
            importance_w: take("gate.importance_w")?,
            importance_b: take("gate.importance_b")?,
        };
        if !arrays.is_empty() {
            return Err(Error::Checkpoint {
                reason: format!(
                    "unexpected parameters in checkpoint: {:?}",
                    arrays.keys().collect::<Vec<_>>()
                ),
            });
        }
        Ok(params)
    }
}

/// Tape bindings for every matcher parameter.
pub struct MatcherNodes {
    pub text: TextEncoderNodes,
    pub visual: VisualEncoderNodes,
    pub gates: GateNodes,
}
