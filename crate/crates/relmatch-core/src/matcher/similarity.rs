//! Word-conditioned attention and the image-text similarity head.
//!
//! Per word: cosine similarities to every visual row are clipped at zero
//! and L2-normalized over rows, a temperature softmax turns them into
//! attention, and the attention-weighted row sum is the attended vector.
//! Attended relation and region vectors are mixed by a sigmoid fusion gate
//! conditioned on the word; the similarity of the whole pair is the sum of
//! absolute importance-gated word-image cosines.

use super::MatcherHyper;
use crate::diffcore::{Array, NodeId, Tape};
use crate::error::{Error, Result};
use crate::visenc::ProjectedNodes;

/// Gate parameters as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct GateNodes {
    pub fusion_w: NodeId,
    pub fusion_b: NodeId,
    pub importance_w: NodeId,
    pub importance_b: NodeId,
}

/// Node handles for one word's attention stack, for trace extraction.
pub struct WordSimNodes {
    pub att_regions: NodeId,
    pub att_relations: Option<NodeId>,
    pub attended_regions: NodeId,
    pub attended_relations: Option<NodeId>,
    /// `None` for images without relations, where the gate is forced to 0.
    pub fusion_gate: Option<NodeId>,
    pub attended: NodeId,
    pub cosine: NodeId,
    pub importance_gate: NodeId,
}

pub struct SimilarityNodes {
    pub sim: NodeId,
    pub words: Vec<WordSimNodes>,
}

/// Cosine of `word` against every row: `rows . word / (max(eps, |row|) * max(eps, |word|))`.
fn cosine_to_rows(tape: &mut Tape, rows: NodeId, word: NodeId, eps: f64) -> Result<NodeId> {
    let dots = tape.matmul(rows, word)?;
    let sq = tape.mul(rows, rows)?;
    let h = tape.value(rows).shape()[1];
    let ones = tape.constant(Array::filled(&[h], 1.0));
    let sums = tape.matmul(sq, ones)?;
    let norms = tape.sqrt(sums)?;
    let norms = tape.clamp_min(norms, eps)?;
    let wnorm = tape.l2norm(word)?;
    let wnorm = tape.clamp_min(wnorm, eps)?;
    let denom = tape.mul(norms, wnorm)?;
    tape.div(dots, denom)
}

/// Cosine between two vectors with the same epsilon guard.
fn cosine_pair(tape: &mut Tape, a: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
    let dot = tape.dot(a, b)?;
    let na = tape.l2norm(a)?;
    let na = tape.clamp_min(na, eps)?;
    let nb = tape.l2norm(b)?;
    let nb = tape.clamp_min(nb, eps)?;
    let denom = tape.mul(na, nb)?;
    tape.div(dot, denom)
}

/// Clipped, row-normalized similarity column for one word.
fn normalized_column(tape: &mut Tape, rows: NodeId, word: NodeId, eps: f64) -> Result<NodeId> {
    let s = cosine_to_rows(tape, rows, word, eps)?;
    let pos = tape.relu(s)?;
    let norm = tape.l2norm(pos)?;
    let norm = tape.clamp_min(norm, eps)?;
    tape.div(pos, norm)
}

/// Temperature softmax over the column and the attention-weighted row sum.
fn attend_column(
    tape: &mut Tape,
    rows: NodeId,
    shat: NodeId,
    lambda: f64,
) -> Result<(NodeId, NodeId)> {
    let scaled = tape.scale(shat, lambda)?;
    let att = tape.softmax(scaled)?;
    let rows_t = tape.transpose(rows)?;
    let attended = tape.matmul(rows_t, att)?;
    Ok((att, attended))
}

/// Sigmoid gate conditioned on the word vector.
fn gate(tape: &mut Tape, w: NodeId, b: NodeId, word: NodeId) -> Result<NodeId> {
    let dot = tape.dot(w, word)?;
    let pre = tape.add(dot, b)?;
    tape.sigmoid(pre)
}

/// Gate-mixed attended vector. For images without relations the gate is
/// forced to 0 and the attended region vector passes through unchanged.
fn fuse_on_tape(
    tape: &mut Tape,
    fusion_w: NodeId,
    fusion_b: NodeId,
    attended_relations: Option<NodeId>,
    attended_regions: NodeId,
    word: NodeId,
) -> Result<(Option<NodeId>, NodeId)> {
    match attended_relations {
        Some(a_rel) => {
            let g = gate(tape, fusion_w, fusion_b, word)?;
            let from_rel = tape.mul(a_rel, g)?;
            let keep = tape.one_minus(g)?;
            let from_rgn = tape.mul(attended_regions, keep)?;
            let mixed = tape.add(from_rel, from_rgn)?;
            Ok((Some(g), mixed))
        }
        None => Ok((None, attended_regions)),
    }
}

/// Full similarity between one image's projected rows and one caption's
/// word vectors, all on the tape.
pub fn similarity_on_tape(
    tape: &mut Tape,
    gates: &GateNodes,
    vis: &ProjectedNodes,
    words: &[NodeId],
    hyper: &MatcherHyper,
) -> Result<SimilarityNodes> {
    if words.is_empty() {
        return Err(Error::EmptyCaption {
            caption: "similarity over zero words".into(),
        });
    }
    hyper.validate()?;
    let eps = hyper.epsilon;
    let mut contributions = Vec::with_capacity(words.len());
    let mut word_nodes = Vec::with_capacity(words.len());

    for &word in words {
        let shat_rgn = normalized_column(tape, vis.regions, word, eps)?;
        let (att_regions, attended_regions) =
            attend_column(tape, vis.regions, shat_rgn, hyper.lambda_regions)?;

        let (att_relations, attended_relations) = match vis.relations {
            Some(rel) => {
                let shat_rel = normalized_column(tape, rel, word, eps)?;
                let (att_rel, a_rel) = attend_column(tape, rel, shat_rel, hyper.lambda_relations)?;
                (Some(att_rel), Some(a_rel))
            }
            None => (None, None),
        };
        let (fusion_gate, attended) = fuse_on_tape(
            tape,
            gates.fusion_w,
            gates.fusion_b,
            attended_relations,
            attended_regions,
            word,
        )?;

        let cosine = cosine_pair(tape, attended, word, eps)?;
        let importance_gate = gate(tape, gates.importance_w, gates.importance_b, word)?;
        let weighted = tape.mul(importance_gate, cosine)?;
        let contribution = tape.abs(weighted)?;
        contributions.push(contribution);

        word_nodes.push(WordSimNodes {
            att_regions,
            att_relations,
            attended_regions,
            attended_relations,
            fusion_gate,
            attended,
            cosine,
            importance_gate,
        });
    }

    let stacked = tape.concat_rows(&contributions)?;
    let sim = tape.sum(stacked)?;
    Ok(SimilarityNodes {
        sim,
        words: word_nodes,
    })
}

/// Inspection record of one word's attention stack.
#[derive(Debug, Clone, PartialEq)]
pub struct WordTrace {
    pub region_attention: Vec<f64>,
    pub relation_attention: Vec<f64>,
    pub attended_regions: Vec<f64>,
    pub attended_relations: Vec<f64>,
    pub fusion_gate: f64,
    pub attended: Vec<f64>,
    pub cosine: f64,
    pub importance_gate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub words: Vec<WordTrace>,
}

use super::MatcherParams;
use crate::textenc::TextEncoding;
use crate::visenc::ProjectedVisual;

/// Similarity between projected visual rows and an encoded caption, with the
/// full attention trace.
pub fn similarity(
    projected: &ProjectedVisual,
    text: &TextEncoding,
    params: &MatcherParams,
    hyper: &MatcherHyper,
) -> Result<(f64, AttentionTrace)> {
    let mut tape = Tape::new();
    let gates = GateNodes {
        fusion_w: tape.constant(params.fusion_w.clone()),
        fusion_b: tape.constant(params.fusion_b.clone()),
        importance_w: tape.constant(params.importance_w.clone()),
        importance_b: tape.constant(params.importance_b.clone()),
    };
    let regions = tape.constant(projected.regions.clone());
    let relations = if projected.relations.shape()[0] > 0 {
        Some(tape.constant(projected.relations.clone()))
    } else {
        None
    };
    let words: Vec<NodeId> = (0..text.word_count())
        .map(|j| tape.constant(Array::vector(text.word(j).to_vec())))
        .collect();
    let nodes = similarity_on_tape(
        &mut tape,
        &gates,
        &ProjectedNodes { regions, relations },
        &words,
        hyper,
    )?;
    let sim = tape.value(nodes.sim).scalar_value();
    let trace = extract_trace(&tape, &nodes);
    Ok((sim, trace))
}

pub(crate) fn extract_trace(tape: &Tape, nodes: &SimilarityNodes) -> AttentionTrace {
    let words = nodes
        .words
        .iter()
        .map(|w| WordTrace {
            region_attention: tape.value(w.att_regions).data().to_vec(),
            relation_attention: w
                .att_relations
                .map(|id| tape.value(id).data().to_vec())
                .unwrap_or_default(),
            attended_regions: tape.value(w.attended_regions).data().to_vec(),
            attended_relations: w
                .attended_relations
                .map(|id| tape.value(id).data().to_vec())
                .unwrap_or_default(),
            fusion_gate: w
                .fusion_gate
                .map(|id| tape.value(id).scalar_value())
                .unwrap_or(0.0),
            attended: tape.value(w.attended).data().to_vec(),
            cosine: tape.value(w.cosine).scalar_value(),
            importance_gate: tape.value(w.importance_gate).scalar_value(),
        })
        .collect();
    AttentionTrace { words }
}

/// Clipped, row-normalized cosine similarities between every visual row and
/// every word: a `rows x words` matrix.
pub fn normalized_similarities(
    words: &Array,
    rows: &Array,
    eps: f64,
) -> Result<Array> {
    if rows.shape()[0] == 0 {
        return Err(Error::BadRank {
            op: "normalized_similarities",
            expected: "a non-empty row set",
            shape: rows.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let rows_node = tape.constant(rows.clone());
    let n_words = words.shape()[0];
    let mut columns = Vec::with_capacity(n_words);
    for j in 0..n_words {
        let w = tape.constant(Array::vector(words.row_slice(j).to_vec()));
        columns.push(normalized_column(&mut tape, rows_node, w, eps)?);
    }
    let mut out = Array::zeros(&[rows.shape()[0], n_words]);
    for (j, &col) in columns.iter().enumerate() {
        for i in 0..rows.shape()[0] {
            out.data_mut()[i * n_words + j] = tape.value(col).data()[i];
        }
    }
    Ok(out)
}

/// Gate-mixed attended vector `g*a_rel + (1-g)*a_rgn` with its gate value.
/// `attended_relations = None` (no relations in the image) forces `g = 0`.
pub fn fuse(
    attended_relations: Option<&[f64]>,
    attended_regions: &[f64],
    word: &[f64],
    fusion_w: &[f64],
    fusion_b: f64,
) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let w = tape.constant(Array::vector(fusion_w.to_vec()));
    let b = tape.constant(Array::scalar(fusion_b));
    let a_rgn = tape.constant(Array::vector(attended_regions.to_vec()));
    let a_rel = attended_relations
        .map(|a| tape.constant(Array::vector(a.to_vec())));
    let word = tape.constant(Array::vector(word.to_vec()));
    let (g, mixed) = fuse_on_tape(&mut tape, w, b, a_rel, a_rgn, word)?;
    Ok((
        tape.value(mixed).data().to_vec(),
        g.map(|id| tape.value(id).scalar_value()).unwrap_or(0.0),
    ))
}

/// Softmax attention over one normalized-similarity column and the attended
/// row combination it produces.
pub fn attend(shat_column: &[f64], rows: &Array, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if lambda <= 0.0 {
        return Err(Error::Config {
            line: 0,
            reason: "attention temperature must be positive".into(),
        });
    }
    let mut tape = Tape::new();
    let rows_node = tape.constant(rows.clone());
    let shat = tape.constant(Array::vector(shat_column.to_vec()));
    let (att, attended) = attend_column(&mut tape, rows_node, shat, lambda)?;
    Ok((
        tape.value(att).data().to_vec(),
        tape.value(attended).data().to_vec(),
    ))
}
