//! Matcher against the scripted oracle: normalized similarities, attention,
//! fusion, full similarity, and the hardest-negative triplet loss.

mod common;

use common::{cosine_guarded, dot, norm, random_instance, scripted_similarity, softmax};
use rand::Rng;
use relmatch_core::diffcore::Array;
use relmatch_core::matcher::{
    attend, fuse, hardest_negatives, normalized_similarities, similarity,
    triplet_loss_from_grid, triplet_loss_hardest, MatcherHyper, MatcherParams, PairItem,
};
use relmatch_core::rng::substream;
use relmatch_core::textenc::TextEncoding;
use relmatch_core::visenc::{synth_features, ProjectedVisual, SynthSpec};

const EPS: f64 = 1e-8;

fn matrix(rows: &[Vec<f64>]) -> Array {
    let cols = rows.first().map_or(0, |r| r.len());
    Array::from_vec(
        vec![rows.len(), cols],
        rows.iter().flatten().copied().collect(),
    )
    .unwrap()
}

// ---- normalized_similarities -----------------------------------------------

#[test]
fn self_similarity_normalizes_to_one() {
    let w = vec![vec![0.4, -0.3, 0.8]];
    let rows = vec![w[0].clone()];
    let shat = normalized_similarities(&matrix(&w), &matrix(&rows), EPS).unwrap();
    assert!((shat.at(0, 0) - 1.0).abs() < 1e-12);
}

#[test]
fn all_negative_similarities_clip_to_zero_column() {
    let w = vec![vec![1.0, 1.0]];
    let rows = vec![vec![-1.0, -1.0], vec![-2.0, -0.5]];
    let shat = normalized_similarities(&matrix(&w), &matrix(&rows), EPS).unwrap();
    assert_eq!(shat.at(0, 0), 0.0);
    assert_eq!(shat.at(1, 0), 0.0);
}

#[test]
fn normalized_similarities_match_scripted_oracle() {
    let mut rng = substream(41, "shat-oracle");
    for _ in 0..20 {
        let inst = random_instance(&mut rng, 3, 0, 2, 4);
        let shat =
            normalized_similarities(&matrix(&inst.words), &matrix(&inst.regions), EPS).unwrap();
        for (j, word) in inst.words.iter().enumerate() {
            let s: Vec<f64> = inst
                .regions
                .iter()
                .map(|r| cosine_guarded(r, word, EPS))
                .collect();
            let pos: Vec<f64> = s.iter().map(|&v| v.max(0.0)).collect();
            let z = norm(&pos).max(EPS);
            for i in 0..3 {
                assert!((shat.at(i, j) - pos[i] / z).abs() < 1e-10);
            }
        }
    }
}

// ---- attend -----------------------------------------------------------------

#[test]
fn single_row_attention_is_identity() {
    let rows = vec![vec![0.3, 0.7, -0.2]];
    let (att, attended) = attend(&[0.9], &matrix(&rows), 9.0).unwrap();
    assert_eq!(att, vec![1.0]);
    assert_eq!(attended, rows[0]);
}

#[test]
fn large_temperature_approaches_hard_alignment() {
    let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]];
    let shat = [0.2, 0.9, 0.4];
    let (_, attended) = attend(&shat, &matrix(&rows), 100.0).unwrap();
    for (a, r) in attended.iter().zip(&rows[1]) {
        assert!((a - r).abs() < 1e-3, "hard alignment should pick the argmax row");
    }
}

#[test]
fn attention_matches_scripted_softmax_oracle() {
    let mut rng = substream(42, "attend-oracle");
    for _ in 0..20 {
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let shat: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let lambda = rng.gen_range(0.5..20.0);
        let (att, attended) = attend(&shat, &matrix(&rows), lambda).unwrap();

        let expect_att = softmax(&shat.iter().map(|&v| lambda * v).collect::<Vec<_>>());
        for (a, e) in att.iter().zip(&expect_att) {
            assert!((a - e).abs() < 1e-10);
        }
        for j in 0..4 {
            let expect: f64 = expect_att.iter().zip(&rows).map(|(a, r)| a * r[j]).sum();
            assert!((attended[j] - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn argmax_attention_row_is_temperature_invariant() {
    let mut rng = substream(43, "argmax-invariance");
    for _ in 0..50 {
        let shat: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let argmax_of = |att: &[f64]| {
            att.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let mut winners = std::collections::HashSet::new();
        for lambda in [0.1, 1.0, 9.0, 50.0] {
            let (att, _) = attend(&shat, &matrix(&rows), lambda).unwrap();
            winners.insert(argmax_of(&att));
        }
        assert_eq!(winners.len(), 1, "argmax must not depend on temperature");
    }
}

// ---- fuse ---------------------------------------------------------------------

#[test]
fn neutral_gate_takes_the_midpoint() {
    let a_rel = vec![1.0, 0.0];
    let a_rgn = vec![0.0, 1.0];
    let word = vec![0.3, -0.4];
    let (mixed, g) = fuse(Some(&a_rel), &a_rgn, &word, &[0.0, 0.0], 0.0).unwrap();
    assert_eq!(g, 0.5);
    assert_eq!(mixed, vec![0.5, 0.5]);
}

#[test]
fn saturated_gate_passes_relations_through() {
    let a_rel = vec![1.0, -2.0];
    let a_rgn = vec![5.0, 5.0];
    let word = vec![0.1, 0.2];
    let (mixed, g) = fuse(Some(&a_rel), &a_rgn, &word, &[0.0, 0.0], 50.0).unwrap();
    assert!(g > 1.0 - 1e-10);
    for (m, r) in mixed.iter().zip(&a_rel) {
        assert!((m - r).abs() < 1e-10);
    }
}

#[test]
fn no_relations_forces_gate_to_zero() {
    let a_rgn = vec![0.25, -0.75];
    let (mixed, g) = fuse(None, &a_rgn, &[1.0, 1.0], &[3.0, 3.0], 3.0).unwrap();
    assert_eq!(g, 0.0);
    assert_eq!(mixed, a_rgn);
}

#[test]
fn fuse_matches_scripted_mixture() {
    let mut rng = substream(44, "fuse-oracle");
    for _ in 0..20 {
        let h = 4;
        let randvec =
            |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let a_rel = randvec(&mut rng);
        let a_rgn = randvec(&mut rng);
        let word = randvec(&mut rng);
        let w = randvec(&mut rng);
        let b = rng.gen_range(-1.0..1.0);
        let (mixed, g) = fuse(Some(&a_rel), &a_rgn, &word, &w, b).unwrap();
        let expect_g = 1.0 / (1.0 + (-(dot(&w, &word) + b)).exp());
        assert!((g - expect_g).abs() < 1e-12);
        for j in 0..h {
            let expect = expect_g * a_rel[j] + (1.0 - expect_g) * a_rgn[j];
            assert!((mixed[j] - expect).abs() < 1e-12);
        }
    }
}

// ---- similarity ----------------------------------------------------------------

fn gate_forced_params(h: usize, importance_bias: f64) -> MatcherParams {
    let mut rng = substream(45, "sim-params");
    let mut params = MatcherParams::init(4, 2, h, 2, 2, &mut rng);
    params.importance_w = Array::zeros(&[h]);
    params.importance_b = Array::scalar(importance_bias);
    params
}

#[test]
fn perfect_single_region_match_scores_near_one() {
    let word = vec![0.6, -0.2, 0.7];
    let projected = ProjectedVisual {
        regions: matrix(&[word.clone()]),
        relations: Array::zeros(&[0, 3]),
    };
    let text = TextEncoding {
        words: matrix(&[word]),
        caption_id: 0,
    };
    let params = gate_forced_params(3, 50.0); // importance gate ~ 1
    let (sim, trace) = similarity(&projected, &text, &params, &MatcherHyper::default()).unwrap();
    assert!((sim - 1.0).abs() < 1e-9, "sim = {sim}");
    assert_eq!(trace.words.len(), 1);
    assert_eq!(trace.words[0].fusion_gate, 0.0); // no relations
    assert!((trace.words[0].cosine - 1.0).abs() < 1e-12);
}

#[test]
fn killed_importance_gate_zeroes_similarity() {
    let mut rng = substream(46, "gate-kill");
    let inst = random_instance(&mut rng, 3, 2, 4, 5);
    let projected = ProjectedVisual {
        regions: matrix(&inst.regions),
        relations: matrix(&inst.relations),
    };
    let text = TextEncoding {
        words: matrix(&inst.words),
        caption_id: 0,
    };
    let params = gate_forced_params(5, -50.0); // importance gate ~ 0
    let (sim, _) = similarity(&projected, &text, &params, &MatcherHyper::default()).unwrap();
    assert!(sim.abs() < 1e-9, "sim = {sim}");
}

#[test]
fn similarity_matches_scripted_oracle_on_random_instances() {
    let mut rng = substream(47, "sim-oracle");
    let hyper = MatcherHyper::default();
    for trial in 0..100 {
        let k = rng.gen_range(1..6);
        let m = rng.gen_range(0..5);
        let n = rng.gen_range(1..5);
        let h = rng.gen_range(2..9);
        let inst = random_instance(&mut rng, k, m, n, h);
        let expect = scripted_similarity(&inst, &hyper);
        let got = common::implementation_similarity(&inst, &hyper);
        assert!(
            (expect - got).abs() < 1e-8,
            "trial {trial}: scripted {expect} vs implementation {got}"
        );
    }
}

#[test]
fn zero_norm_word_vector_gives_zero_similarity_not_nan() {
    let projected = ProjectedVisual {
        regions: matrix(&[vec![0.5, 0.5]]),
        relations: Array::zeros(&[0, 2]),
    };
    let text = TextEncoding {
        words: matrix(&[vec![0.0, 0.0]]),
        caption_id: 0,
    };
    let params = gate_forced_params(2, 50.0);
    let (sim, trace) = similarity(&projected, &text, &params, &MatcherHyper::default()).unwrap();
    assert!(sim.is_finite());
    assert!(sim.abs() < 1e-9);
    assert!(trace.words[0].cosine.abs() < 1e-9);
}

// ---- attention/gate invariants ---------------------------------------------------

#[test]
fn attention_columns_sum_to_one_and_gates_stay_open() {
    let mut rng = substream(48, "invariants");
    let hyper = MatcherHyper::default();
    for _ in 0..200 {
        let k = rng.gen_range(1..6);
        let m = rng.gen_range(0..5);
        let n = rng.gen_range(1..4);
        let h = rng.gen_range(2..7);
        let inst = random_instance(&mut rng, k, m, n, h);
        let projected = ProjectedVisual {
            regions: matrix(&inst.regions),
            relations: matrix(&inst.relations),
        };
        let text = TextEncoding {
            words: matrix(&inst.words),
            caption_id: 0,
        };
        let params = common::gate_only_params(&inst, h);
        let (sim, trace) = similarity(&projected, &text, &params, &hyper).unwrap();

        assert!(sim >= 0.0 && sim <= n as f64 + 1e-12);
        for word in &trace.words {
            let rgn_sum: f64 = word.region_attention.iter().sum();
            assert!((rgn_sum - 1.0).abs() < 1e-6);
            if m > 0 {
                let rel_sum: f64 = word.relation_attention.iter().sum();
                assert!((rel_sum - 1.0).abs() < 1e-6);
                assert!(word.fusion_gate > 0.0 && word.fusion_gate < 1.0);
            }
            assert!(word.importance_gate > 0.0 && word.importance_gate < 1.0);
            assert!(word.cosine >= -1.0 - 1e-12 && word.cosine <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn permuting_rows_leaves_similarity_unchanged() {
    use rand::seq::SliceRandom;
    let mut rng = substream(49, "permutation");
    let hyper = MatcherHyper::default();
    for _ in 0..50 {
        let inst = random_instance(&mut rng, 4, 3, 2, 5);
        let base = common::implementation_similarity(&inst, &hyper);

        let mut shuffled = common::SimInstance {
            regions: inst.regions.clone(),
            relations: inst.relations.clone(),
            words: inst.words.clone(),
            fusion_w: inst.fusion_w.clone(),
            fusion_b: inst.fusion_b,
            importance_w: inst.importance_w.clone(),
            importance_b: inst.importance_b,
        };
        shuffled.regions.shuffle(&mut rng);
        shuffled.relations.shuffle(&mut rng);
        let permuted = common::implementation_similarity(&shuffled, &hyper);
        assert!((base - permuted).abs() < 1e-10);
    }
}

// ---- triplet loss -----------------------------------------------------------------

#[test]
fn satisfied_margin_gives_zero_loss() {
    // positives score 1, negatives 0, margin 0.2
    let n = 3;
    let mut grid = Array::zeros(&[n, n]);
    for i in 0..n {
        grid.data_mut()[i * n + i] = 1.0;
    }
    let ids: Vec<u64> = (0..n as u64).collect();
    assert_eq!(triplet_loss_from_grid(&grid, &ids, 0.2).unwrap(), 0.0);
}

#[test]
fn all_equal_similarities_cost_two_margins_per_pair() {
    let n = 4;
    let grid = Array::filled(&[n, n], 0.37);
    let ids: Vec<u64> = (0..n as u64).collect();
    let loss = triplet_loss_from_grid(&grid, &ids, 0.2).unwrap();
    assert!((loss - 2.0 * 0.2 * n as f64).abs() < 1e-12);
}

#[test]
fn hardest_negative_selection_equals_exhaustive_search() {
    let mut rng = substream(50, "hardest");
    for _ in 0..100 {
        let n = rng.gen_range(2..9);
        let mut grid = Array::zeros(&[n, n]);
        for v in grid.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let ids: Vec<u64> = (0..n as u64).collect();
        let negatives = hardest_negatives(&grid, &ids).unwrap();
        for p in 0..n {
            // brute force over all candidates
            let mut best_caption = None;
            let mut best_image = None;
            for c in 0..n {
                if c == p {
                    continue;
                }
                if best_caption.map_or(true, |(_, s)| grid.at(p, c) > s) {
                    best_caption = Some((c, grid.at(p, c)));
                }
                if best_image.map_or(true, |(_, s)| grid.at(c, p) > s) {
                    best_image = Some((c, grid.at(c, p)));
                }
            }
            assert_eq!(negatives[p].caption, best_caption.unwrap().0);
            assert_eq!(negatives[p].image, best_image.unwrap().0);
        }
    }
}

#[test]
fn batch_loss_matches_brute_force_over_candidates() {
    // End to end: similarities from the real model, loss from the scripted
    // brute force.
    let mut rng = substream(51, "loss-brute");
    let hyper = MatcherHyper::default();
    for _ in 0..5 {
        let spec = SynthSpec {
            regions: 3,
            relations: 2,
            region_dim: 4,
            relation_dim: 4,
            label_count: 4,
        };
        let features: Vec<_> = (0..3).map(|i| synth_features(7, i, spec, None)).collect();
        let tokens: Vec<Vec<usize>> = (0..3)
            .map(|_| (0..rng.gen_range(1..4)).map(|_| rng.gen_range(4..10)).collect())
            .collect();
        let params = MatcherParams::init(10, 3, 5, 4, 4, &mut rng);

        let batch: Vec<PairItem<'_>> = features
            .iter()
            .zip(&tokens)
            .map(|(f, t)| PairItem {
                image_id: f.image_id,
                features: f,
                token_ids: t,
            })
            .collect();
        let loss = triplet_loss_hardest(&batch, &params, &hyper).unwrap();

        // brute force: full grid via the public one-pair path
        let mut grid = Array::zeros(&[3, 3]);
        for i in 0..3 {
            let projected = relmatch_core::visenc::project(&features[i], &params.visual).unwrap();
            for j in 0..3 {
                let encoding = relmatch_core::textenc::encode_text(
                    &tokens[j],
                    &params.text,
                    j as u64,
                    Default::default(),
                )
                .unwrap();
                let (s, _) = similarity(&projected, &encoding, &params, &hyper).unwrap();
                grid.data_mut()[i * 3 + j] = s;
            }
        }
        let ids: Vec<u64> = features.iter().map(|f| f.image_id).collect();
        let mut expect = 0.0;
        for p in 0..3 {
            let pos = grid.at(p, p);
            let mut worst_c = f64::NEG_INFINITY;
            let mut worst_i = f64::NEG_INFINITY;
            for c in 0..3 {
                if ids[c] == ids[p] {
                    continue;
                }
                worst_c = worst_c.max(grid.at(p, c));
                worst_i = worst_i.max(grid.at(c, p));
            }
            expect += (worst_c - pos + hyper.margin).max(0.0);
            expect += (worst_i - pos + hyper.margin).max(0.0);
        }
        assert_eq!(loss, expect, "tape loss must equal brute force exactly");
    }
}

#[test]
fn batch_of_one_is_an_error() {
    let mut rng = substream(52, "batch1");
    let spec = SynthSpec {
        regions: 2,
        relations: 1,
        region_dim: 3,
        relation_dim: 3,
        label_count: 2,
    };
    let features = synth_features(1, 0, spec, None);
    let params = MatcherParams::init(8, 2, 4, 3, 3, &mut rng);
    let tokens = vec![4, 5];
    let batch = [PairItem {
        image_id: 0,
        features: &features,
        token_ids: &tokens,
    }];
    assert!(matches!(
        triplet_loss_hardest(&batch, &params, &MatcherHyper::default()),
        Err(relmatch_core::Error::BatchTooSmall { got: 1 })
    ));
}

#[test]
fn zero_learning_rate_changes_nothing() {
    use relmatch_core::corpus::{synth_corpus, SynthCorpusConfig};
    use relmatch_core::matcher::{train_matcher, MatcherTrainConfig};

    let data = synth_corpus(
        3,
        SynthCorpusConfig {
            pairs: 4,
            regions: 2,
            relations: 1,
            region_dim: 4,
            relation_dim: 4,
            noise: 0.1,
        },
    );
    let vocab = data.corpus.build_vocabulary().unwrap();
    let mut params = MatcherParams::init(vocab.len(), 4, 4, 4, 4, &mut substream(4, "lr0"));
    let initial = params.clone();
    let features = data
        .features
        .iter()
        .map(|f| (f.image_id, f.clone()))
        .collect();
    let outcome = train_matcher(
        &mut params,
        &MatcherHyper::default(),
        &data.corpus,
        &features,
        &vocab,
        &MatcherTrainConfig {
            learning_rate_1: 0.0,
            epochs_1: 3,
            learning_rate_2: 0.0,
            epochs_2: 3,
            batch_size: 4,
            max_len: 16,
            seed: 4,
        },
    )
    .unwrap();
    assert_eq!(params, initial, "zero learning rate must not move parameters");
    let first = outcome.loss_curve[0];
    for &loss in &outcome.loss_curve {
        assert!((loss - first).abs() < 1e-9, "loss must stay flat");
    }
}

// ---- full-model gradient -----------------------------------------------------------

#[test]
fn full_model_gradient_passes_finite_difference_check() {
    let mut rng = substream(53, "full-grad");
    let spec = SynthSpec {
        regions: 3,
        relations: 2,
        region_dim: 4,
        relation_dim: 4,
        label_count: 4,
    };
    let features: Vec<_> = (0..2).map(|i| synth_features(11, i, spec, None)).collect();
    let tokens = vec![vec![4usize, 5, 6], vec![7usize, 4]];
    let params = MatcherParams::init(8, 3, 4, 4, 4, &mut rng);
    let report = common::full_matcher_gradcheck(
        &params,
        &MatcherHyper::default(),
        &features,
        &tokens,
        1e-5,
        1e-4,
    );
    assert!(report.passed(), "{report}");
}
