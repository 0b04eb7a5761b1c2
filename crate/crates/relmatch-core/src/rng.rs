//! Deterministic random number generation.
//!
//! All randomness in the crate flows from one root seed through named
//! substreams, so that e.g. parameter initialization and batch shuffling
//! draw from independent, reproducible streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used to fold a substream label into the root seed. Stable across
/// platforms and releases, unlike the std hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive the RNG for a named substream of the root seed.
pub fn substream(root_seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(root_seed ^ fnv1a(label.as_bytes()))
}

/// Substream further split by an index (per-image streams and the like).
pub fn substream_indexed(root_seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mixed = fnv1a(label.as_bytes()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(root_seed ^ mixed)
}
