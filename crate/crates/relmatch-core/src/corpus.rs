//! Paired (image, captions) records: JSON-lines IO, vocabulary building,
//! and a synthetic planted-pair generator for desk-scale experiments.

use crate::error::{Error, Result};
use crate::textenc::{tokenize, Vocabulary};
use crate::visenc::{synth_features, PlantedAlignment, SynthSpec, VisualFeatureSet};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// One image with its reference captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub image_id: u64,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn new(entries: Vec<CorpusEntry>) -> Self {
        Corpus { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn caption_count(&self) -> usize {
        self.entries.iter().map(|e| e.captions.len()).sum()
    }

    /// All (entry index, caption index) pairs in corpus order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.caption_count());
        for (i, entry) in self.entries.iter().enumerate() {
            for j in 0..entry.captions.len() {
                out.push((i, j));
            }
        }
        out
    }

    pub fn caption(&self, pair: (usize, usize)) -> &str {
        &self.entries[pair.0].captions[pair.1]
    }

    /// Vocabulary over every caption token.
    pub fn build_vocabulary(&self) -> Result<Vocabulary> {
        if self.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Vocabulary::from_captions(
            self.entries
                .iter()
                .flat_map(|e| e.captions.iter().map(|c| c.as_str())),
        )
    }

    /// One JSON object per line: `{"image_id": .., "captions": [..]}`.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(Error::io_at(path))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str::<CorpusEntry>(&line)?);
        }
        Ok(Corpus { entries })
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(Error::io_at(path))?;
        let mut w = BufWriter::new(file);
        for entry in &self.entries {
            serde_json::to_writer(&mut w, entry)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Tokenize and index every caption against a vocabulary, ready for
    /// training. Order matches `pairs()`.
    pub fn tokenized_pairs(&self, vocab: &Vocabulary) -> Result<Vec<TokenizedPair>> {
        let mut out = Vec::new();
        for (entry_idx, entry) in self.entries.iter().enumerate() {
            for (caption_idx, caption) in entry.captions.iter().enumerate() {
                let tokens = tokenize(caption)?;
                out.push(TokenizedPair {
                    image_id: entry.image_id,
                    entry_idx,
                    caption_idx,
                    token_ids: vocab.encode(&tokens),
                });
            }
        }
        Ok(out)
    }
}

/// One (image, caption) training pair with caption tokens already indexed.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPair {
    pub image_id: u64,
    pub entry_idx: usize,
    pub caption_idx: usize,
    pub token_ids: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SynthCorpusConfig {
    pub pairs: usize,
    pub regions: usize,
    pub relations: usize,
    pub region_dim: usize,
    pub relation_dim: usize,
    /// Noise added to planted rows; 0 plants exact copies of the target.
    pub noise: f64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        SynthCorpusConfig {
            pairs: 32,
            regions: 4,
            relations: 3,
            region_dim: 16,
            relation_dim: 16,
            noise: 0.05,
        }
    }
}

/// A synthetic paired dataset: every image's feature rows are noisy copies
/// of a per-pair target vector and its caption is made of per-pair tokens,
/// so a matcher can learn the pairing to perfection.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub corpus: Corpus,
    pub features: Vec<VisualFeatureSet>,
    pub relation_labels: Vec<String>,
}

pub fn synth_corpus(seed: u64, config: SynthCorpusConfig) -> SynthData {
    let mut entries = Vec::with_capacity(config.pairs);
    let mut features = Vec::with_capacity(config.pairs);
    for i in 0..config.pairs {
        let image_id = 1000 + i as u64;
        let caption = format!("entity{i} doing{i} place{i}");
        entries.push(CorpusEntry {
            image_id,
            captions: vec![caption],
        });

        let mut target_rng = crate::rng::substream_indexed(seed, "synth-target", i as u64);
        let region_target =
            crate::diffcore::Array::gaussian(&[config.region_dim], &mut target_rng);
        let relation_target =
            crate::diffcore::Array::gaussian(&[config.relation_dim], &mut target_rng);
        let planted = PlantedAlignment {
            region_targets: (0..config.regions)
                .map(|r| (r, region_target.data().to_vec()))
                .collect(),
            relation_targets: (0..config.relations)
                .map(|r| (r, relation_target.data().to_vec()))
                .collect(),
            noise: config.noise,
        };
        features.push(synth_features(
            seed,
            image_id,
            SynthSpec {
                regions: config.regions,
                relations: config.relations,
                region_dim: config.region_dim,
                relation_dim: config.relation_dim,
                label_count: (config.pairs as u32).max(1),
            },
            Some(&planted),
        ));
    }
    let relation_labels = (0..config.pairs).map(|i| format!("relation{i}")).collect();
    SynthData {
        corpus: Corpus::new(entries),
        features,
        relation_labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip() {
        let corpus = Corpus::new(vec![
            CorpusEntry {
                image_id: 1,
                captions: vec!["a cat".into(), "ein kater".into()],
            },
            CorpusEntry {
                image_id: 2,
                captions: vec!["a dog".into()],
            },
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        corpus.save_jsonl(&path).unwrap();
        let loaded = Corpus::load_jsonl(&path).unwrap();
        assert_eq!(corpus, loaded);
        assert_eq!(loaded.caption_count(), 3);
        assert_eq!(loaded.pairs(), vec![(0, 0), (0, 1), (1, 0)]);
    }

    #[test]
    fn synth_corpus_is_deterministic_and_paired() {
        let cfg = SynthCorpusConfig {
            pairs: 4,
            ..Default::default()
        };
        let a = synth_corpus(5, cfg);
        let b = synth_corpus(5, cfg);
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.features, b.features);
        assert_eq!(a.corpus.len(), 4);
        for (entry, feats) in a.corpus.entries.iter().zip(&a.features) {
            assert_eq!(entry.image_id, feats.image_id);
        }
    }

    #[test]
    fn empty_corpus_has_no_vocabulary() {
        assert!(Corpus::default().build_vocabulary().is_err());
    }
}
