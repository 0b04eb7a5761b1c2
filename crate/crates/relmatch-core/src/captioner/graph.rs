//! Captioner forward graph: one decoder step, teacher-forced likelihood,
//! greedy/beam decoding, and the sampled rollout used for self-critical
//! training.

use super::{AttentionHeadNodes, CaptionerNodes, CaptionerParams, LstmNodes};
use crate::diffcore::{Array, NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::ParamBindings;
use crate::textenc::Vocabulary;
use crate::visenc::{project_on_tape, VisualFeatureSet};
use rand::Rng;

/// Per-image context on the tape: projected rows and their means. Images
/// without relations get zero vectors for the relation block.
pub struct PreparedVisual {
    pub regions: NodeId,
    pub relations: Option<NodeId>,
    pub region_mean: NodeId,
    pub relation_mean: NodeId,
}

pub fn prepare_visual(
    tape: &mut Tape,
    nodes: &CaptionerNodes,
    features: &VisualFeatureSet,
) -> Result<PreparedVisual> {
    let projected = project_on_tape(tape, &nodes.projection, features)?;
    let region_mean = tape.mean_rows(projected.regions)?;
    let (relations, relation_mean) = match projected.relations {
        Some(rel) => (Some(rel), tape.mean_rows(rel)?),
        None => (
            None,
            tape.constant(Array::zeros(&[nodes.feature_dim])),
        ),
    };
    Ok(PreparedVisual {
        regions: projected.regions,
        relations,
        region_mean,
        relation_mean,
    })
}

/// Decoder state; both LSTM layers start from zeros at t = 0.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h1: NodeId,
    pub c1: NodeId,
    pub h2: NodeId,
    pub c2: NodeId,
    pub step: usize,
}

impl DecoderState {
    pub fn initial(tape: &mut Tape, hidden: usize) -> Self {
        let zeros = tape.constant(Array::zeros(&[hidden]));
        DecoderState {
            h1: zeros,
            c1: zeros,
            h2: zeros,
            c2: zeros,
            step: 0,
        }
    }
}

fn lstm_step(
    tape: &mut Tape,
    p: &LstmNodes,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let gate = |tape: &mut Tape, w: NodeId, u: NodeId, b: NodeId| -> Result<NodeId> {
        let wx = tape.matmul(w, x)?;
        let uh = tape.matmul(u, h)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let i_pre = gate(tape, p.w_i, p.u_i, p.b_i)?;
    let i = tape.sigmoid(i_pre)?;
    let f_pre = gate(tape, p.w_f, p.u_f, p.b_f)?;
    let f = tape.sigmoid(f_pre)?;
    let o_pre = gate(tape, p.w_o, p.u_o, p.b_o)?;
    let o = tape.sigmoid(o_pre)?;
    let c_pre = gate(tape, p.w_c, p.u_c, p.b_c)?;
    let g = tape.tanh(c_pre)?;

    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let c_act = tape.tanh(c_next)?;
    let h_next = tape.mul(o, c_act)?;
    Ok((h_next, c_next))
}

/// Additive attention over feature rows conditioned on the attention-LSTM
/// state: `softmax(score . tanh(rows W_f^T + W_h h1))`.
fn attend_head(
    tape: &mut Tape,
    head: &AttentionHeadNodes,
    rows: NodeId,
    h1: NodeId,
) -> Result<(NodeId, NodeId)> {
    let wf_t = tape.transpose(head.w_features)?;
    let projected = tape.matmul(rows, wf_t)?; // k x att
    let hid = tape.matmul(head.w_hidden, h1)?; // att
    let k = tape.value(rows).shape()[0];
    let att_dim = tape.value(hid).len();
    let hid_row = tape.reshape(hid, &[1, att_dim])?;
    let tiled = tape.concat_rows(&vec![hid_row; k])?;
    let summed = tape.add(projected, tiled)?;
    let activated = tape.tanh(summed)?;
    let scores = tape.matmul(activated, head.score)?; // k
    let weights = tape.softmax(scores)?;
    let rows_t = tape.transpose(rows)?;
    let attended = tape.matmul(rows_t, weights)?;
    Ok((weights, attended))
}

pub struct StepOutput {
    pub state: DecoderState,
    /// Vocabulary log-probabilities for the next token.
    pub log_probs: NodeId,
    pub region_attention: NodeId,
    pub relation_attention: Option<NodeId>,
}

/// One decoder step: the attention LSTM reads
/// `[mean relations; mean regions; previous language state; embedding of the
/// previous token]`, both heads attend, and the language LSTM reads
/// `[attended regions; attended relations; h1]`.
pub fn step_on_tape(
    tape: &mut Tape,
    nodes: &CaptionerNodes,
    state: &DecoderState,
    prev_token: usize,
    visual: &PreparedVisual,
) -> Result<StepOutput> {
    let vocab = tape.value(nodes.embed).shape()[0];
    if prev_token >= vocab {
        return Err(Error::TokenOutOfRange {
            index: prev_token,
            size: vocab,
        });
    }
    let embedded = tape.gather_rows(nodes.embed, &[prev_token])?;
    let embed_dim = tape.value(embedded).shape()[1];
    let word = tape.reshape(embedded, &[embed_dim])?;

    let x1 = tape.concat_rows(&[visual.relation_mean, visual.region_mean, state.h2, word])?;
    let (h1, c1) = lstm_step(tape, &nodes.attention_lstm, x1, state.h1, state.c1)?;

    let (region_attention, attended_regions) =
        attend_head(tape, &nodes.region_head, visual.regions, h1)?;
    let (relation_attention, attended_relations) = match visual.relations {
        Some(rel) => {
            let (w, a) = attend_head(tape, &nodes.relation_head, rel, h1)?;
            (Some(w), a)
        }
        None => (None, tape.constant(Array::zeros(&[nodes.feature_dim]))),
    };

    let x2 = tape.concat_rows(&[attended_regions, attended_relations, h1])?;
    let (h2, c2) = lstm_step(tape, &nodes.language_lstm, x2, state.h2, state.c2)?;

    let logits_w = tape.matmul(nodes.w_out, h2)?;
    let logits = tape.add(logits_w, nodes.b_out)?;
    let log_probs = tape.log_softmax(logits)?;

    Ok(StepOutput {
        state: DecoderState {
            h1,
            c1,
            h2,
            c2,
            step: state.step + 1,
        },
        log_probs,
        region_attention,
        relation_attention,
    })
}

/// Teacher-forced mean negative log-likelihood of the gold next-tokens.
/// The caption must be `[<bos>, w1.., <eos>]`.
pub fn xe_loss_on_tape(
    tape: &mut Tape,
    nodes: &CaptionerNodes,
    visual: &PreparedVisual,
    token_ids: &[usize],
) -> Result<NodeId> {
    if token_ids.len() < 2
        || token_ids[0] != Vocabulary::BOS_ID
        || *token_ids.last().unwrap() != Vocabulary::EOS_ID
    {
        return Err(Error::CaptionTooShort);
    }
    let mut state = DecoderState::initial(tape, nodes.hidden);
    let mut gold_log_probs = Vec::with_capacity(token_ids.len() - 1);
    for t in 1..token_ids.len() {
        let out = step_on_tape(tape, nodes, &state, token_ids[t - 1], visual)?;
        state = out.state;
        gold_log_probs.push(tape.slice_rows(out.log_probs, token_ids[t], 1)?);
    }
    let stacked = tape.concat_rows(&gold_log_probs)?;
    let mean = tape.mean(stacked)?;
    tape.neg(mean)
}

/// Teacher-forced loss as a plain value.
pub fn xe_loss(
    token_ids: &[usize],
    features: &VisualFeatureSet,
    params: &CaptionerParams,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut reg = ParamBindings::new();
    let nodes = params.bind(&mut tape, &mut reg);
    let visual = prepare_visual(&mut tape, &nodes, features)?;
    let loss = xe_loss_on_tape(&mut tape, &nodes, &visual, token_ids)?;
    Ok(tape.value(loss).scalar_value())
}

/// Index of the maximum, first occurrence winning ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decode: argmax token per step, stopping at `<eos>` (not emitted),
/// capped at `max_len` emitted tokens.
pub fn decode_greedy(
    features: &VisualFeatureSet,
    params: &CaptionerParams,
    max_len: usize,
) -> Result<(Vec<usize>, f64)> {
    let mut tape = Tape::new();
    let mut reg = ParamBindings::new();
    let nodes = params.bind(&mut tape, &mut reg);
    let visual = prepare_visual(&mut tape, &nodes, features)?;
    let mut state = DecoderState::initial(&mut tape, nodes.hidden);
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut prev = Vocabulary::BOS_ID;
    for _ in 0..max_len {
        let out = step_on_tape(&mut tape, &nodes, &state, prev, &visual)?;
        state = out.state;
        let lp = tape.value(out.log_probs).data();
        let token = argmax(lp);
        log_prob += lp[token];
        if token == Vocabulary::EOS_ID {
            break;
        }
        tokens.push(token);
        prev = token;
    }
    Ok((tokens, log_prob))
}

struct Hypothesis {
    tokens: Vec<usize>,
    score: f64,
    state: Option<DecoderState>,
    finished: bool,
}

/// Beam decode with accumulated log-probability scoring. `beam = 1` equals
/// greedy decoding exactly.
pub fn decode_beam(
    features: &VisualFeatureSet,
    params: &CaptionerParams,
    beam: usize,
    max_len: usize,
) -> Result<(Vec<usize>, f64)> {
    if beam == 0 {
        return Err(Error::Config {
            line: 0,
            reason: "beam width must be at least 1".into(),
        });
    }
    let mut tape = Tape::new();
    let mut reg = ParamBindings::new();
    let nodes = params.bind(&mut tape, &mut reg);
    let visual = prepare_visual(&mut tape, &nodes, features)?;
    let initial = DecoderState::initial(&mut tape, nodes.hidden);

    let mut hypotheses = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        state: Some(initial),
        finished: false,
    }];

    for _ in 0..max_len {
        if hypotheses.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &hypotheses {
            if hyp.finished {
                candidates.push(Hypothesis {
                    tokens: hyp.tokens.clone(),
                    score: hyp.score,
                    state: None,
                    finished: true,
                });
                continue;
            }
            let prev = *hyp.tokens.last().unwrap_or(&Vocabulary::BOS_ID);
            let out = step_on_tape(&mut tape, &nodes, &hyp.state.unwrap(), prev, &visual)?;
            let lp = tape.value(out.log_probs).data().to_vec();
            // expanding the top `beam` tokens per hypothesis is sufficient
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap().then(a.cmp(&b)));
            for &token in order.iter().take(beam) {
                let finished = token == Vocabulary::EOS_ID;
                let mut tokens = hyp.tokens.clone();
                if !finished {
                    tokens.push(token);
                }
                candidates.push(Hypothesis {
                    tokens,
                    score: hyp.score + lp[token],
                    state: Some(out.state),
                    finished,
                });
            }
        }
        candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        candidates.truncate(beam);
        hypotheses = candidates;
    }

    let best = hypotheses
        .into_iter()
        .max_by(|a, b| {
            a.finished
                .cmp(&b.finished)
                .then(a.score.partial_cmp(&b.score).unwrap())
        })
        .expect("at least one hypothesis");
    Ok((best.tokens, best.score))
}

/// One multinomial rollout at temperature 1. Returns the emitted tokens
/// (without `<bos>`, with `<eos>` when reached) alongside the sampling path.
pub fn sample_rollout(
    features: &VisualFeatureSet,
    params: &CaptionerParams,
    rng: &mut impl Rng,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let mut reg = ParamBindings::new();
    let nodes = params.bind(&mut tape, &mut reg);
    let visual = prepare_visual(&mut tape, &nodes, features)?;
    let mut state = DecoderState::initial(&mut tape, nodes.hidden);
    let mut tokens = Vec::new();
    let mut prev = Vocabulary::BOS_ID;
    for _ in 0..max_len {
        let out = step_on_tape(&mut tape, &nodes, &state, prev, &visual)?;
        state = out.state;
        let probs: Vec<f64> = tape.value(out.log_probs).data().iter().map(|l| l.exp()).collect();
        let token = sample_categorical(&probs, rng);
        tokens.push(token);
        if token == Vocabulary::EOS_ID {
            break;
        }
        prev = token;
    }
    Ok(tokens)
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    for (i, &p) in probs.iter().enumerate() {
        if draw < p {
            return i;
        }
        draw -= p;
    }
    probs.len() - 1
}
