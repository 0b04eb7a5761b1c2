//! Shared test support: an independently scripted evaluation of the
//! similarity formulas (plain f64 loops, no tape), random instance
//! generation, and a full-model gradient-check harness.
//!
//! The oracle here deliberately re-derives everything from scratch so that
//! it cannot share a bug with the implementation it checks.

#![allow(dead_code)]

use rand::Rng;
use relmatch_core::diffcore::{compare_gradients, numeric_gradient, Array, GradCheckReport, Tape};
use relmatch_core::matcher::{
    batch_loss_on_tape, MatcherHyper, MatcherParams, PairItem,
};
use relmatch_core::params::ParamBindings;
use relmatch_core::visenc::VisualFeatureSet;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_guarded(a: &[f64], b: &[f64], eps: f64) -> f64 {
    dot(a, b) / (norm(a).max(eps) * norm(b).max(eps))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// One random similarity instance: projected rows plus word vectors and
/// gate parameters, detached from any feature file or encoder.
pub struct SimInstance {
    pub regions: Vec<Vec<f64>>,
    pub relations: Vec<Vec<f64>>,
    pub words: Vec<Vec<f64>>,
    pub fusion_w: Vec<f64>,
    pub fusion_b: f64,
    pub importance_w: Vec<f64>,
    pub importance_b: f64,
}

pub fn random_instance(
    rng: &mut impl Rng,
    k: usize,
    m: usize,
    n_words: usize,
    h: usize,
) -> SimInstance {
    let mut vecs = |count: usize| -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| (0..h).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect()
    };
    SimInstance {
        regions: vecs(k),
        relations: vecs(m),
        words: vecs(n_words),
        fusion_w: (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        fusion_b: rng.gen_range(-0.5..0.5),
        importance_w: (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        importance_b: rng.gen_range(-0.5..0.5),
    }
}

/// Literal scripted similarity: clipped normalized cosines, temperature
/// softmax attention, gate fusion, importance-weighted absolute cosines.
pub fn scripted_similarity(inst: &SimInstance, hyper: &MatcherHyper) -> f64 {
    let eps = hyper.epsilon;
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut total = 0.0;

    for word in &inst.words {
        let attend = |rows: &Vec<Vec<f64>>, lambda: f64| -> Vec<f64> {
            let s: Vec<f64> = rows.iter().map(|r| cosine_guarded(r, word, eps)).collect();
            let pos: Vec<f64> = s.iter().map(|&v| v.max(0.0)).collect();
            let z = norm(&pos).max(eps);
            let shat: Vec<f64> = pos.iter().map(|&v| v / z).collect();
            let att = softmax(&shat.iter().map(|&v| lambda * v).collect::<Vec<_>>());
            let h = word.len();
            let mut out = vec![0.0; h];
            for (a, row) in att.iter().zip(rows) {
                for j in 0..h {
                    out[j] += a * row[j];
                }
            }
            out
        };

        let a_rgn = attend(&inst.regions, hyper.lambda_regions);
        let attended = if inst.relations.is_empty() {
            a_rgn
        } else {
            let a_rel = attend(&inst.relations, hyper.lambda_relations);
            let g = sigmoid(dot(&inst.fusion_w, word) + inst.fusion_b);
            a_rel
                .iter()
                .zip(&a_rgn)
                .map(|(&r, &v)| g * r + (1.0 - g) * v)
                .collect()
        };

        let r = cosine_guarded(&attended, word, eps);
        let gi = sigmoid(dot(&inst.importance_w, word) + inst.importance_b);
        total += (gi * r).abs();
    }
    total
}

/// Run the implementation's similarity on a scripted instance.
pub fn implementation_similarity(inst: &SimInstance, hyper: &MatcherHyper) -> f64 {
    use relmatch_core::matcher::similarity;
    use relmatch_core::textenc::TextEncoding;
    use relmatch_core::visenc::ProjectedVisual;

    let h = inst.words[0].len();
    let to_matrix = |rows: &Vec<Vec<f64>>| -> Array {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Array::from_vec(vec![rows.len(), h], data).unwrap()
    };
    let projected = ProjectedVisual {
        regions: to_matrix(&inst.regions),
        relations: to_matrix(&inst.relations),
    };
    let text = TextEncoding {
        words: to_matrix(&inst.words),
        caption_id: 0,
    };
    let params = gate_only_params(inst, h);
    let (sim, _) = similarity(&projected, &text, &params, hyper).unwrap();
    sim
}

/// Matcher params whose text/visual parts are unused placeholders; only the
/// gates matter when similarity is evaluated from projected rows.
pub fn gate_only_params(inst: &SimInstance, h: usize) -> MatcherParams {
    let mut rng = relmatch_core::rng::substream(0, "placeholder");
    let mut params = MatcherParams::init(4, 2, h, 2, 2, &mut rng);
    params.fusion_w = Array::vector(inst.fusion_w.clone());
    params.fusion_b = Array::scalar(inst.fusion_b);
    params.importance_w = Array::vector(inst.importance_w.clone());
    params.importance_b = Array::scalar(inst.importance_b);
    params
}

/// Full-model gradient check: batch triplet loss differentiated with
/// respect to every parameter group, compared against central differences.
pub fn full_matcher_gradcheck(
    params: &MatcherParams,
    hyper: &MatcherHyper,
    batch_features: &[VisualFeatureSet],
    batch_tokens: &[Vec<usize>],
    h: f64,
    tol: f64,
) -> GradCheckReport {
    let forward = |p: &MatcherParams| -> relmatch_core::Result<(f64, Vec<Array>)> {
        let mut tape = Tape::new();
        let mut reg = ParamBindings::new();
        let nodes = p.bind(&mut tape, &mut reg);
        let batch: Vec<PairItem<'_>> = batch_features
            .iter()
            .zip(batch_tokens)
            .map(|(features, tokens)| PairItem {
                image_id: features.image_id,
                features,
                token_ids: tokens,
            })
            .collect();
        let (loss, _) = batch_loss_on_tape(&mut tape, &nodes, &batch, hyper)?;
        let value = tape.value(loss).scalar_value();
        tape.backward(loss)?;
        let grads = reg.gradients(&tape);
        let named = p.named();
        let ordered = named.iter().map(|(n, _)| grads[n].clone()).collect();
        Ok((value, ordered))
    };

    let (_, analytic) = forward(params).unwrap();
    let named = params.named();
    let flat: Vec<Array> = named.iter().map(|(_, a)| (*a).clone()).collect();
    let numeric = numeric_gradient(
        |ps| {
            let mut rebuilt = params.clone();
            for ((_, slot), value) in rebuilt.named_mut().into_iter().zip(ps) {
                *slot = value.clone();
            }
            forward(&rebuilt).map(|(v, _)| v)
        },
        &flat,
        h,
    )
    .unwrap();
    compare_gradients(&analytic, &numeric, tol)
}
