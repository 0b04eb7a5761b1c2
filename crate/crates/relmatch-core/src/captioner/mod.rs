//! Relation-based top-down captioner: an attention LSTM conditioned on
//! mean-pooled region/relation features and the previous word, two additive
//! attention heads (one over region rows, one over relation rows), and a
//! language LSTM producing the vocabulary distribution.

mod graph;
mod train;

pub use graph::{
    decode_beam, decode_greedy, prepare_visual, sample_rollout, step_on_tape, xe_loss,
    xe_loss_on_tape, DecoderState, PreparedVisual, StepOutput,
};
pub use train::{
    policy_gradient, scst_finetune, scst_step, train_captioner, CaptionerTrainConfig,
    ScstConfig, ScstOutcome, ScstStats, XeTrainOutcome,
};

use crate::diffcore::{Array, NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::ParamBindings;
use crate::visenc::{VisualEncoderNodes, VisualEncoderParams};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptionerConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Joint dimension the raw region/relation rows are projected to.
    pub feature_dim: usize,
    pub hidden: usize,
    pub attention_dim: usize,
    pub region_dim: usize,
    pub relation_dim: usize,
}

impl CaptionerConfig {
    /// Input width of the attention LSTM:
    /// `[mean relations; mean regions; previous language state; word embedding]`.
    pub fn attention_input_dim(&self) -> usize {
        2 * self.feature_dim + self.hidden + self.embed_dim
    }

    /// Input width of the language LSTM: `[attended regions; attended relations; h1]`.
    pub fn language_input_dim(&self) -> usize {
        2 * self.feature_dim + self.hidden
    }
}

/// One standard 4-gate LSTM cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_i: Array,
    pub u_i: Array,
    pub b_i: Array,
    pub w_f: Array,
    pub u_f: Array,
    pub b_f: Array,
    pub w_o: Array,
    pub u_o: Array,
    pub b_o: Array,
    pub w_c: Array,
    pub u_c: Array,
    pub b_c: Array,
}

impl LstmParams {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w = |rng: &mut _| Array::xavier(hidden, input_dim, rng);
        let u = |rng: &mut _| Array::xavier(hidden, hidden, rng);
        LstmParams {
            w_i: w(rng),
            u_i: u(rng),
            b_i: Array::zeros(&[hidden]),
            w_f: w(rng),
            u_f: u(rng),
            b_f: Array::zeros(&[hidden]),
            w_o: w(rng),
            u_o: u(rng),
            b_o: Array::zeros(&[hidden]),
            w_c: w(rng),
            u_c: u(rng),
            b_c: Array::zeros(&[hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_i.shape()[0]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Array)> {
        vec![
            (format!("{prefix}.w_i"), &self.w_i),
            (format!("{prefix}.u_i"), &self.u_i),
            (format!("{prefix}.b_i"), &self.b_i),
            (format!("{prefix}.w_f"), &self.w_f),
            (format!("{prefix}.u_f"), &self.u_f),
            (format!("{prefix}.b_f"), &self.b_f),
            (format!("{prefix}.w_o"), &self.w_o),
            (format!("{prefix}.u_o"), &self.u_o),
            (format!("{prefix}.b_o"), &self.b_o),
            (format!("{prefix}.w_c"), &self.w_c),
            (format!("{prefix}.u_c"), &self.u_c),
            (format!("{prefix}.b_c"), &self.b_c),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array)> {
        vec![
            (format!("{prefix}.w_i"), &mut self.w_i),
            (format!("{prefix}.u_i"), &mut self.u_i),
            (format!("{prefix}.b_i"), &mut self.b_i),
            (format!("{prefix}.w_f"), &mut self.w_f),
            (format!("{prefix}.u_f"), &mut self.u_f),
            (format!("{prefix}.b_f"), &mut self.b_f),
            (format!("{prefix}.w_o"), &mut self.w_o),
            (format!("{prefix}.u_o"), &mut self.u_o),
            (format!("{prefix}.b_o"), &mut self.b_o),
            (format!("{prefix}.w_c"), &mut self.w_c),
            (format!("{prefix}.u_c"), &mut self.u_c),
            (format!("{prefix}.b_c"), &mut self.b_c),
        ]
    }

    fn bind(&self, tape: &mut Tape, reg: &mut ParamBindings, prefix: &str) -> LstmNodes {
        LstmNodes {
            w_i: reg.register(tape, format!("{prefix}.w_i"), &self.w_i),
            u_i: reg.register(tape, format!("{prefix}.u_i"), &self.u_i),
            b_i: reg.register(tape, format!("{prefix}.b_i"), &self.b_i),
            w_f: reg.register(tape, format!("{prefix}.w_f"), &self.w_f),
            u_f: reg.register(tape, format!("{prefix}.u_f"), &self.u_f),
            b_f: reg.register(tape, format!("{prefix}.b_f"), &self.b_f),
            w_o: reg.register(tape, format!("{prefix}.w_o"), &self.w_o),
            u_o: reg.register(tape, format!("{prefix}.u_o"), &self.u_o),
            b_o: reg.register(tape, format!("{prefix}.b_o"), &self.b_o),
            w_c: reg.register(tape, format!("{prefix}.w_c"), &self.w_c),
            u_c: reg.register(tape, format!("{prefix}.u_c"), &self.u_c),
            b_c: reg.register(tape, format!("{prefix}.b_c"), &self.b_c),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    pub w_i: NodeId,
    pub u_i: NodeId,
    pub b_i: NodeId,
    pub w_f: NodeId,
    pub u_f: NodeId,
    pub b_f: NodeId,
    pub w_o: NodeId,
    pub u_o: NodeId,
    pub b_o: NodeId,
    pub w_c: NodeId,
    pub u_c: NodeId,
    pub b_c: NodeId,
}

/// Linear-tanh additive attention head over feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeadParams {
    /// `attention_dim x feature_dim`
    pub w_features: Array,
    /// `attention_dim x hidden`
    pub w_hidden: Array,
    /// `attention_dim`
    pub score: Array,
}

impl AttentionHeadParams {
    pub fn init(feature_dim: usize, hidden: usize, attention_dim: usize, rng: &mut impl Rng) -> Self {
        AttentionHeadParams {
            w_features: Array::xavier(attention_dim, feature_dim, rng),
            w_hidden: Array::xavier(attention_dim, hidden, rng),
            score: Array::uniform(
                &[attention_dim],
                -(1.0 / attention_dim as f64).sqrt(),
                (1.0 / attention_dim as f64).sqrt(),
                rng,
            ),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Array)> {
        vec![
            (format!("{prefix}.w_features"), &self.w_features),
            (format!("{prefix}.w_hidden"), &self.w_hidden),
            (format!("{prefix}.score"), &self.score),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array)> {
        vec![
            (format!("{prefix}.w_features"), &mut self.w_features),
            (format!("{prefix}.w_hidden"), &mut self.w_hidden),
            (format!("{prefix}.score"), &mut self.score),
        ]
    }

    fn bind(&self, tape: &mut Tape, reg: &mut ParamBindings, prefix: &str) -> AttentionHeadNodes {
        AttentionHeadNodes {
            w_features: reg.register(tape, format!("{prefix}.w_features"), &self.w_features),
            w_hidden: reg.register(tape, format!("{prefix}.w_hidden"), &self.w_hidden),
            score: reg.register(tape, format!("{prefix}.score"), &self.score),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionHeadNodes {
    pub w_features: NodeId,
    pub w_hidden: NodeId,
    pub score: NodeId,
}

/// All trainable state of the captioner. Raw visual rows are projected by
/// captioner-owned affine maps before any attention.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionerParams {
    pub embed: Array,
    pub projection: VisualEncoderParams,
    pub attention_lstm: LstmParams,
    pub language_lstm: LstmParams,
    pub region_head: AttentionHeadParams,
    pub relation_head: AttentionHeadParams,
    pub w_out: Array,
    pub b_out: Array,
}

impl CaptionerParams {
    pub fn init(config: &CaptionerConfig, rng: &mut impl Rng) -> Self {
        CaptionerParams {
            embed: Array::uniform(&[config.vocab_size, config.embed_dim], -0.1, 0.1, rng),
            projection: VisualEncoderParams::init(
                config.feature_dim,
                config.region_dim,
                config.relation_dim,
                rng,
            ),
            attention_lstm: LstmParams::init(config.attention_input_dim(), config.hidden, rng),
            language_lstm: LstmParams::init(config.language_input_dim(), config.hidden, rng),
            region_head: AttentionHeadParams::init(
                config.feature_dim,
                config.hidden,
                config.attention_dim,
                rng,
            ),
            relation_head: AttentionHeadParams::init(
                config.feature_dim,
                config.hidden,
                config.attention_dim,
                rng,
            ),
            w_out: Array::xavier(config.vocab_size, config.hidden, rng),
            b_out: Array::zeros(&[config.vocab_size]),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.attention_lstm.hidden()
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.joint_dim()
    }

    pub fn named(&self) -> Vec<(String, &Array)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        out.extend(self.projection.named("proj"));
        out.extend(self.attention_lstm.named("att_lstm"));
        out.extend(self.language_lstm.named("lang_lstm"));
        out.extend(self.region_head.named("region_head"));
        out.extend(self.relation_head.named("relation_head"));
        out.push(("w_out".to_string(), &self.w_out));
        out.push(("b_out".to_string(), &self.b_out));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        out.extend(self.projection.named_mut("proj"));
        out.extend(self.attention_lstm.named_mut("att_lstm"));
        out.extend(self.language_lstm.named_mut("lang_lstm"));
        out.extend(self.region_head.named_mut("region_head"));
        out.extend(self.relation_head.named_mut("relation_head"));
        out.push(("w_out".to_string(), &mut self.w_out));
        out.push(("b_out".to_string(), &mut self.b_out));
        out
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamBindings) -> CaptionerNodes {
        CaptionerNodes {
            embed: reg.register(tape, "embed", &self.embed),
            projection: self.projection.bind(tape, reg, "proj"),
            attention_lstm: self.attention_lstm.bind(tape, reg, "att_lstm"),
            language_lstm: self.language_lstm.bind(tape, reg, "lang_lstm"),
            region_head: self.region_head.bind(tape, reg, "region_head"),
            relation_head: self.relation_head.bind(tape, reg, "relation_head"),
            w_out: reg.register(tape, "w_out", &self.w_out),
            b_out: reg.register(tape, "b_out", &self.b_out),
            hidden: self.hidden(),
            feature_dim: self.feature_dim(),
        }
    }

    /// Rebuild from checkpointed named arrays.
    pub fn from_named(mut arrays: std::collections::HashMap<String, Array>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Array> {
            arrays.remove(name).ok_or_else(|| Error::Checkpoint {
                reason: format!("missing parameter {name}"),
            })
        };
        let embed = take("embed")?;
        let projection = VisualEncoderParams {
            w_regions: take("proj.w_regions")?,
            b_regions: take("proj.b_regions")?,
            w_relations: take("proj.w_relations")?,
            b_relations: take("proj.b_relations")?,
        };
        let mut rng = crate::rng::substream(0, "void");
        let mut template = |input: usize| LstmParams::init(input, 1, &mut rng);
        let mut attention_lstm = template(1);
        for (name, slot) in attention_lstm.named_mut("att_lstm") {
            *slot = take(&name)?;
        }
        let mut language_lstm = template(1);
        for (name, slot) in language_lstm.named_mut("lang_lstm") {
            *slot = take(&name)?;
        }
        let mut region_head = AttentionHeadParams::init(1, 1, 1, &mut rng);
        for (name, slot) in region_head.named_mut("region_head") {
            *slot = take(&name)?;
        }
        let mut relation_head = AttentionHeadParams::init(1, 1, 1, &mut rng);
        for (name, slot) in relation_head.named_mut("relation_head") {
            *slot = take(&name)?;
        }
        let params = CaptionerParams {
            embed,
            projection,
            attention_lstm,
            language_lstm,
            region_head,
            relation_head,
            w_out: take("w_out")?,
            b_out: take("b_out")?,
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

pub struct CaptionerNodes {
    pub embed: NodeId,
    pub projection: VisualEncoderNodes,
    pub attention_lstm: LstmNodes,
    pub language_lstm: LstmNodes,
    pub region_head: AttentionHeadNodes,
    pub relation_head: AttentionHeadNodes,
    pub w_out: NodeId,
    pub b_out: NodeId,
    pub hidden: usize,
    pub feature_dim: usize,
}
