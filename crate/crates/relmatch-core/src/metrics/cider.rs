//! Consensus caption scoring: tf-idf weighted n-gram cosine per order
//! (n = 1..4) with count clipping and a Gaussian length penalty, averaged
//! over orders and references, scaled by 10.

use crate::error::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};

const MAX_ORDER: usize = 4;
const LENGTH_SIGMA: f64 = 6.0;

/// Joined-token n-gram key; the tokenizer never emits the separator.
fn ngram_key(tokens: &[String]) -> String {
    tokens.join("\u{1f}")
}

/// Document frequencies over a reference corpus. Each image counts once per
/// n-gram, no matter how many of its references contain it.
#[derive(Debug, Clone, PartialEq)]
pub struct CiderModel {
    doc_freq: BTreeMap<String, f64>,
    corpus_size: usize,
}

impl CiderModel {
    /// `refs_per_image[i]` holds the tokenized references of image `i`.
    pub fn from_references(refs_per_image: &[Vec<Vec<String>>]) -> Result<Self> {
        if refs_per_image.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut doc_freq: BTreeMap<String, f64> = BTreeMap::new();
        for refs in refs_per_image {
            let mut seen: BTreeSet<String> = BTreeSet::new();
            for reference in refs {
                for n in 1..=MAX_ORDER {
                    for window in reference.windows(n) {
                        seen.insert(ngram_key(window));
                    }
                }
            }
            for key in seen {
                *doc_freq.entry(key).or_insert(0.0) += 1.0;
            }
        }
        Ok(CiderModel {
            doc_freq,
            corpus_size: refs_per_image.len(),
        })
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    fn log_corpus_size(&self) -> f64 {
        (self.corpus_size as f64).ln()
    }

    /// tf-idf vectors per order, their norms, and the token length.
    /// idf is `log(N) - log(max(1, df))`: n-grams absent from the corpus
    /// keep the full `log(N)` weight.
    fn tfidf(&self, tokens: &[String]) -> ([BTreeMap<String, f64>; MAX_ORDER], [f64; MAX_ORDER]) {
        let log_n = self.log_corpus_size();
        let mut vecs: [BTreeMap<String, f64>; MAX_ORDER] = Default::default();
        let mut norms = [0.0; MAX_ORDER];
        for n in 1..=MAX_ORDER {
            let mut counts: BTreeMap<String, f64> = BTreeMap::new();
            for window in tokens.windows(n) {
                *counts.entry(ngram_key(window)).or_insert(0.0) += 1.0;
            }
            for (key, tf) in counts {
                let df = self.doc_freq.get(&key).copied().unwrap_or(0.0);
                let idf = log_n - df.max(1.0).ln();
                let w = tf * idf;
                norms[n - 1] += w * w;
                vecs[n - 1].insert(key, w);
            }
            norms[n - 1] = norms[n - 1].sqrt();
        }
        (vecs, norms)
    }
}

/// Consensus score of a candidate against an image's references, in [0, 10].
/// Empty candidates score 0.
pub fn cider_d(candidate: &[String], references: &[Vec<String>], model: &CiderModel) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let (cand_vec, cand_norm) = model.tfidf(candidate);
    let mut per_order = [0.0; MAX_ORDER];
    for reference in references {
        let (ref_vec, ref_norm) = model.tfidf(reference);
        let delta = candidate.len() as f64 - reference.len() as f64;
        let penalty = (-(delta * delta) / (2.0 * LENGTH_SIGMA * LENGTH_SIGMA)).exp();
        for n in 0..MAX_ORDER {
            let mut overlap = 0.0;
            for (key, &cw) in &cand_vec[n] {
                if let Some(&rw) = ref_vec[n].get(key) {
                    // candidate counts clip against the reference
                    overlap += cw.min(rw) * rw;
                }
            }
            if cand_norm[n] > 0.0 && ref_norm[n] > 0.0 {
                overlap /= cand_norm[n] * ref_norm[n];
            }
            per_order[n] += overlap * penalty;
        }
    }
    let mean_over_orders: f64 = per_order.iter().sum::<f64>() / MAX_ORDER as f64;
    10.0 * mean_over_orders / references.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn disjoint_candidate_scores_zero() {
        let model =
            CiderModel::from_references(&[vec![toks("a cat on a mat")], vec![toks("dogs run")]])
                .unwrap();
        let score = cider_d(&toks("purple elephants fly"), &[toks("a cat on a mat")], &model);
        assert_eq!(score, 0.0);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        let model = CiderModel::from_references(&[vec![toks("a b c")]]).unwrap();
        assert_eq!(cider_d(&[], &[toks("a b c")], &model), 0.0);
    }

    #[test]
    fn reference_order_does_not_matter() {
        let model = CiderModel::from_references(&[
            vec![toks("a man rides a bike"), toks("a person on a bicycle")],
            vec![toks("two dogs play fetch")],
        ])
        .unwrap();
        let refs_a = vec![toks("a man rides a bike"), toks("a person on a bicycle")];
        let refs_b = vec![toks("a person on a bicycle"), toks("a man rides a bike")];
        let cand = toks("a man on a bicycle");
        assert_eq!(cider_d(&cand, &refs_a, &model), cider_d(&cand, &refs_b, &model));
    }
}
