//! Metrics against hand-computed fixtures and exhaustive-sort oracles.

use proptest::prelude::*;
use rand::Rng;
use relmatch_core::corpus::{synth_corpus, SynthCorpusConfig};
use relmatch_core::diffcore::Array;
use relmatch_core::matcher::{MatcherHyper, MatcherParams};
use relmatch_core::metrics::{
    cider_d, eval_retrieval, recall_at_k, CiderModel, Direction, EvalConfig,
};
use relmatch_core::rng::substream;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_string()).collect()
}

// ---- hand-computed consensus-score fixtures -----------------------------------
//
// Two-document reference corpus:
//   doc0: "two birds sitting on a branch"
//   doc1: "a man riding a horse"
// Candidate "two birds on a branch" against doc0, worked out by hand:
//   unigrams: 4 of 5 carry idf ln2 ("a" appears in both documents, idf 0),
//     all match -> 4/(2*sqrt(5)) = 2/sqrt(5)
//   bigrams: all 4 weigh ln2 ("birds on" is corpus-absent and keeps ln N),
//     3 match -> 3/(2*sqrt(5))
//   trigrams: 1 of 3 matches over ref norm 2 -> 1/(2*sqrt(3))
//   4-grams: no overlap -> 0
//   length penalty: exp(-(5-6)^2 / (2*36)) = exp(-1/72)
// score = 10 * exp(-1/72) * (2/sqrt(5) + 3/(2 sqrt(5)) + 1/(2 sqrt(3)) + 0)/4

#[test]
fn cider_matches_hand_computed_two_document_fixture() {
    let model = CiderModel::from_references(&[
        vec![toks("two birds sitting on a branch")],
        vec![toks("a man riding a horse")],
    ])
    .unwrap();
    let score = cider_d(
        &toks("two birds on a branch"),
        &[toks("two birds sitting on a branch")],
        &model,
    );
    let expected = 10.0
        * (-1.0f64 / 72.0).exp()
        * (2.0 / 5.0f64.sqrt() + 3.0 / (2.0 * 5.0f64.sqrt()) + 1.0 / (2.0 * 3.0f64.sqrt()))
        / 4.0;
    assert!(
        (score - expected).abs() < 1e-9,
        "score {score} vs hand-computed {expected}"
    );
}

#[test]
fn identical_candidate_with_full_ngram_profile_scores_ten() {
    // Both references are 5 tokens with disjoint vocabulary, so every
    // n-gram order is populated and carries nonzero idf.
    let reference = toks("a red bird flies high");
    let model = CiderModel::from_references(&[
        vec![reference.clone()],
        vec![toks("the dog runs fast today")],
    ])
    .unwrap();
    let score = cider_d(&reference, &[reference.clone()], &model);
    assert!((score - 10.0).abs() < 1e-9, "score {score}");
}

#[test]
fn superset_of_matching_ngrams_scores_at_least_as_high() {
    // Hand-enumerated n-gram overlaps for nested candidates.
    let model = CiderModel::from_references(&[
        vec![toks("a red bird flies high")],
        vec![toks("the dog runs fast today")],
    ])
    .unwrap();
    let refs = [toks("a red bird flies high")];
    let score_small = cider_d(&toks("a red bird"), &refs, &model);
    let score_large = cider_d(&toks("a red bird flies"), &refs, &model);

    let expect_small = 10.0
        * (-4.0f64 / 72.0).exp()
        * ((3.0f64 / 5.0).sqrt() + 1.0 / 2.0f64.sqrt() + 1.0 / 3.0f64.sqrt())
        / 4.0;
    let expect_large = 10.0
        * (-1.0f64 / 72.0).exp()
        * (2.0 / 5.0f64.sqrt() + 3.0f64.sqrt() / 2.0 + (2.0f64 / 3.0).sqrt() + 1.0 / 2.0f64.sqrt())
        / 4.0;
    assert!((score_small - expect_small).abs() < 1e-9, "{score_small} vs {expect_small}");
    assert!((score_large - expect_large).abs() < 1e-9, "{score_large} vs {expect_large}");
    assert!(score_large >= score_small);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn cider_stays_in_range_and_ignores_reference_order(
        seed in 0u64..5000,
        refs in 1usize..4,
        len in 1usize..8,
    ) {
        let mut rng = substream(seed, "cider-prop");
        let word = |rng: &mut rand_chacha::ChaCha8Rng| format!("w{}", rng.gen_range(0..12));
        let sentence = |rng: &mut rand_chacha::ChaCha8Rng, len: usize| -> Vec<String> {
            (0..len).map(|_| word(rng)).collect()
        };
        let corpus: Vec<Vec<Vec<String>>> = (0..3)
            .map(|_| (0..refs).map(|_| sentence(&mut rng, len + 2)).collect())
            .collect();
        let model = CiderModel::from_references(&corpus).unwrap();
        let candidate = sentence(&mut rng, len);
        let mut references = corpus[0].clone();
        let forward = cider_d(&candidate, &references, &model);
        prop_assert!((0.0..=10.0 + 1e-12).contains(&forward));
        references.reverse();
        let reversed = cider_d(&candidate, &references, &model);
        prop_assert!((forward - reversed).abs() < 1e-12);
    }
}

// ---- recall ----------------------------------------------------------------------

#[test]
fn diagonal_grid_has_perfect_recall_both_ways() {
    let n = 3;
    let mut grid = Array::zeros(&[n, n]);
    for i in 0..n {
        grid.data_mut()[i * n + i] = 1.0;
    }
    let pairing: Vec<usize> = (0..n).collect();
    assert_eq!(
        recall_at_k(&grid, &pairing, 1, Direction::TextToImage).unwrap(),
        1.0
    );
    assert_eq!(
        recall_at_k(&grid, &pairing, 1, Direction::ImageToText).unwrap(),
        1.0
    );
}

#[test]
fn constant_grid_resolves_ties_by_index() {
    let n = 5;
    let grid = Array::filled(&[n, n], 0.5);
    let pairing: Vec<usize> = (0..n).collect();
    let r1 = recall_at_k(&grid, &pairing, 1, Direction::TextToImage).unwrap();
    assert!((r1 - 1.0 / n as f64).abs() < 1e-12);
}

#[test]
fn cutoff_beyond_candidates_is_an_error() {
    let grid = Array::filled(&[2, 4], 0.0);
    let pairing = vec![0, 0, 1, 1];
    assert!(recall_at_k(&grid, &pairing, 3, Direction::TextToImage).is_err());
    assert!(recall_at_k(&grid, &pairing, 5, Direction::ImageToText).is_err());
}

/// Exhaustive-sort oracle: rank candidates by (score desc, index asc) and
/// read off the gold rank.
fn oracle_recall(
    grid: &Array,
    pairing: &[usize],
    k: usize,
    direction: Direction,
) -> f64 {
    let (n_img, n_cap) = (grid.shape()[0], grid.shape()[1]);
    let ranked = |scores: Vec<f64>| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        idx
    };
    match direction {
        Direction::TextToImage => {
            let mut hits = 0;
            for j in 0..n_cap {
                let order = ranked((0..n_img).map(|i| grid.at(i, j)).collect());
                if order[..k].contains(&pairing[j]) {
                    hits += 1;
                }
            }
            hits as f64 / n_cap as f64
        }
        Direction::ImageToText => {
            let mut hits = 0;
            for i in 0..n_img {
                let order = ranked((0..n_cap).map(|j| grid.at(i, j)).collect());
                let golds: Vec<usize> = (0..n_cap).filter(|&j| pairing[j] == i).collect();
                if order[..k].iter().any(|c| golds.contains(c)) {
                    hits += 1;
                }
            }
            hits as f64 / n_img as f64
        }
    }
}

#[test]
fn random_grid_matches_exhaustive_sort_oracle() {
    let mut rng = substream(61, "recall-oracle");
    let (n_img, caps_per) = (10, 5);
    let n_cap = n_img * caps_per;
    let mut grid = Array::zeros(&[n_img, n_cap]);
    for v in grid.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let pairing: Vec<usize> = (0..n_cap).map(|j| j / caps_per).collect();
    for k in [1, 5, 10] {
        for direction in [Direction::TextToImage, Direction::ImageToText] {
            let got = recall_at_k(&grid, &pairing, k, direction).unwrap();
            let expect = oracle_recall(&grid, &pairing, k, direction);
            assert_eq!(got, expect, "k={k} {direction:?}");
        }
    }
}

#[test]
fn recall_is_monotone_in_k_and_argsort_invariant() {
    let mut rng = substream(62, "recall-invariance");
    for _ in 0..20 {
        let (n_img, n_cap) = (6, 12);
        let mut grid = Array::zeros(&[n_img, n_cap]);
        for v in grid.data_mut() {
            // quantized values so the nonlinear transform cannot create ties
            *v = (rng.gen_range(-1.0f64..1.0) * 1024.0).round() / 1024.0;
        }
        let pairing: Vec<usize> = (0..n_cap).map(|j| j % n_img).collect();

        let mut last = 0.0;
        for k in 1..=n_img {
            let r = recall_at_k(&grid, &pairing, k, Direction::TextToImage).unwrap();
            assert!(r >= last);
            last = r;
        }

        // strictly increasing transforms preserve every recall
        let transforms: [&dyn Fn(f64) -> f64; 3] =
            [&|x| 4.0 * x, &|x| 0.5 * x, &|x| x * x * x + x];
        for f in transforms {
            let mapped = grid.map(f);
            for k in [1, 3] {
                for direction in [Direction::TextToImage, Direction::ImageToText] {
                    assert_eq!(
                        recall_at_k(&grid, &pairing, k, direction).unwrap(),
                        recall_at_k(&mapped, &pairing, k, direction).unwrap()
                    );
                }
            }
        }
    }
}

// ---- fold-averaged retrieval evaluation ----------------------------------------

fn tiny_model_and_data(
    pairs: usize,
) -> (
    MatcherParams,
    MatcherHyper,
    relmatch_core::corpus::Corpus,
    std::collections::HashMap<u64, relmatch_core::visenc::VisualFeatureSet>,
    relmatch_core::textenc::Vocabulary,
) {
    let data = synth_corpus(
        17,
        SynthCorpusConfig {
            pairs,
            regions: 2,
            relations: 1,
            region_dim: 4,
            relation_dim: 4,
            noise: 0.1,
        },
    );
    let vocab = data.corpus.build_vocabulary().unwrap();
    let mut rng = substream(18, "eval-params");
    let params = MatcherParams::init(vocab.len(), 3, 4, 4, 4, &mut rng);
    let features = data
        .features
        .iter()
        .map(|f| (f.image_id, f.clone()))
        .collect();
    (params, MatcherHyper::default(), data.corpus, features, vocab)
}

#[test]
fn folds_of_size_one_give_perfect_text_to_image_recall() {
    let (params, hyper, corpus, features, vocab) = tiny_model_and_data(4);
    let report = eval_retrieval(
        &params,
        &hyper,
        &corpus,
        &features,
        &vocab,
        &EvalConfig {
            folds: 4,
            recall_ks: vec![1],
            max_len: 64,
        },
    )
    .unwrap();
    assert_eq!(report.folds.len(), 4);
    assert_eq!(report.mean_text_to_image.recall[&1], 1.0);
}

#[test]
fn fold_averaging_equals_independent_per_fold_runs() {
    let (params, hyper, corpus, features, vocab) = tiny_model_and_data(6);
    let config = EvalConfig {
        folds: 3,
        recall_ks: vec![1, 2],
        max_len: 64,
    };
    let report = eval_retrieval(&params, &hyper, &corpus, &features, &vocab, &config).unwrap();

    // recompute each fold as its own corpus
    let fold_size = corpus.len() / 3;
    let mut sums: std::collections::BTreeMap<usize, f64> = Default::default();
    for chunk in corpus.entries.chunks(fold_size) {
        let sub = relmatch_core::corpus::Corpus::new(chunk.to_vec());
        let single = eval_retrieval(
            &params,
            &hyper,
            &sub,
            &features,
            &vocab,
            &EvalConfig {
                folds: 1,
                recall_ks: vec![1, 2],
                max_len: 64,
            },
        )
        .unwrap();
        for (&k, &v) in &single.mean_text_to_image.recall {
            *sums.entry(k).or_insert(0.0) += v;
        }
    }
    for (&k, &total) in &sums {
        let expect = total / 3.0;
        assert!((report.mean_text_to_image.recall[&k] - expect).abs() < 1e-12);
    }
}

#[test]
fn uneven_folds_are_rejected() {
    let (params, hyper, corpus, features, vocab) = tiny_model_and_data(5);
    let err = eval_retrieval(
        &params,
        &hyper,
        &corpus,
        &features,
        &vocab,
        &EvalConfig {
            folds: 2,
            recall_ks: vec![1],
            max_len: 64,
        },
    )
    .unwrap_err();
    assert!(matches!(
        err,
        relmatch_core::Error::UnevenFolds { count: 5, folds: 2 }
    ));
}

#[test]
fn missing_features_name_the_image() {
    let (params, hyper, corpus, mut features, vocab) = tiny_model_and_data(2);
    features.remove(&corpus.entries[1].image_id);
    let err = eval_retrieval(
        &params,
        &hyper,
        &corpus,
        &features,
        &vocab,
        &EvalConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, relmatch_core::Error::MissingFeatures { .. }));
}
