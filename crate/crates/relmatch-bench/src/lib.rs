//! Shared fixtures for the criterion benchmarks.

use relmatch_core::corpus::{synth_corpus, SynthCorpusConfig, SynthData};
use relmatch_core::matcher::MatcherParams;
use relmatch_core::rng::substream;
use relmatch_core::textenc::Vocabulary;

pub struct Fixture {
    pub data: SynthData,
    pub vocab: Vocabulary,
    pub params: MatcherParams,
}

/// A mid-sized synthetic workload: 36 regions and relations per image as in
/// the published setup, desk-sized dims everywhere else.
pub fn fixture(pairs: usize, joint_dim: usize) -> Fixture {
    let data = synth_corpus(
        11,
        SynthCorpusConfig {
            pairs,
            regions: 36,
            relations: 36,
            region_dim: 64,
            relation_dim: 64,
            noise: 0.1,
        },
    );
    let vocab = data.corpus.build_vocabulary().expect("non-empty corpus");
    let params = MatcherParams::init(
        vocab.len(),
        64,
        joint_dim,
        64,
        64,
        &mut substream(12, "bench-init"),
    );
    Fixture {
        data,
        vocab,
        params,
    }
}
