//! Construction of caption test splits restricted to semantic visual
//! relations: keep images with at least one caption containing a predicate
//! from the packaged 164-phrase list, then sample one matching caption per
//! image.

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::textenc::tokenize;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// The packaged semantic-relation predicate list, one phrase per line.
pub const PACKAGED_PREDICATES: &str = include_str!("../resources/semantic_predicates.txt");

/// Ordered list of multi-word predicate phrases, tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateList {
    phrases: Vec<Vec<String>>,
    pub provenance: String,
}

impl PredicateList {
    /// The packaged list of 164 semantic relation predicates.
    pub fn packaged() -> Self {
        Self::parse(PACKAGED_PREDICATES, "packaged semantic predicates")
            .expect("packaged predicate list is well-formed")
    }

    /// Parse one phrase per line; phrases are lowercased and tokenized.
    pub fn parse(text: &str, provenance: &str) -> Result<Self> {
        let mut phrases = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            phrases.push(tokenize(line)?);
        }
        if phrases.is_empty() {
            return Err(Error::BadPredicateList {
                reason: "no phrases".into(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for phrase in &phrases {
            if !seen.insert(phrase.join(" ")) {
                return Err(Error::BadPredicateList {
                    reason: format!("duplicate phrase {:?}", phrase.join(" ")),
                });
            }
        }
        Ok(PredicateList {
            phrases,
            provenance: provenance.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io_at(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn phrases(&self) -> impl Iterator<Item = String> + '_ {
        self.phrases.iter().map(|p| p.join(" "))
    }
}

/// All predicates whose token sequence appears contiguously in the caption,
/// longest first (ties keep list order). Matching is case-insensitive and
/// punctuation-insensitive because both sides go through the tokenizer.
pub fn match_predicates(caption: &str, list: &PredicateList) -> Result<Vec<String>> {
    let tokens = tokenize(caption)?;
    let mut matches: Vec<(usize, usize)> = Vec::new(); // (phrase len, list index)
    for (idx, phrase) in list.phrases.iter().enumerate() {
        if phrase.len() <= tokens.len()
            && tokens.windows(phrase.len()).any(|w| w == phrase.as_slice())
        {
            matches.push((phrase.len(), idx));
        }
    }
    matches.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(matches
        .into_iter()
        .map(|(_, idx)| list.phrases[idx].join(" "))
        .collect())
}

/// One selected caption per qualifying image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrrSplitEntry {
    pub image_id: u64,
    pub caption: String,
    pub matched_predicates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VrrSplit {
    pub entries: Vec<VrrSplitEntry>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VrrSummary {
    pub image_count: usize,
    /// Occurrences of each predicate over the selected captions.
    pub predicate_histogram: BTreeMap<String, usize>,
}

impl VrrSplit {
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

    pub fn load_jsonl(path: &Path) -> Result<Vec<VrrSplitEntry>> {
        let file = std::fs::File::open(path).map_err(Error::io_at(path))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        Ok(entries)
    }

    pub fn summary(&self) -> VrrSummary {
        let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
        for entry in &self.entries {
            for predicate in &entry.matched_predicates {
                *histogram.entry(predicate.clone()).or_insert(0) += 1;
            }
        }
        VrrSummary {
            image_count: self.entries.len(),
            predicate_histogram: histogram,
        }
    }
}

/// Build the split: an image qualifies when at least one caption matches at
/// least one predicate; one matching caption is sampled uniformly per image.
/// The image set is independent of the seed; only the sampling varies.
pub fn build_split(corpus: &Corpus, list: &PredicateList, seed: u64) -> Result<VrrSplit> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut entries = Vec::new();
    for entry in &corpus.entries {
        let mut matching: Vec<(usize, Vec<String>)> = Vec::new();
        for (idx, caption) in entry.captions.iter().enumerate() {
            let matched = match_predicates(caption, list)?;
            if !matched.is_empty() {
                matching.push((idx, matched));
            }
        }
        if matching.is_empty() {
            continue;
        }
        let mut rng = crate::rng::substream_indexed(seed, "vrr-caption", entry.image_id);
        let pick = rng.gen_range(0..matching.len());
        let (caption_idx, matched_predicates) = matching.swap_remove(pick);
        entries.push(VrrSplitEntry {
            image_id: entry.image_id,
            caption: entry.captions[caption_idx].clone(),
            matched_predicates,
        });
    }
    Ok(VrrSplit { entries, seed })
}
