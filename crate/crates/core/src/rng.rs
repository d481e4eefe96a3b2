//! Named, splittable pseudo-random streams.
//!
//! Every stochastic call site takes an explicit generator derived from the
//! experiment seed and a purpose label, so adding or reordering one consumer
//! of randomness never perturbs the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a label into a seed (splitmix64 over the label bytes).
fn mix(seed: u64, label: &str) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &b in label.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// A deterministic stream for the given experiment seed and purpose.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, label))
}

/// A numbered sub-stream, for per-episode or per-item draws.
pub fn substream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, label) ^ index.wrapping_mul(0xd134_2543_de82_ef95))
}
