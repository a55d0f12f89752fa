//! Deterministic random number generation.
//!
//! Every stochastic operation in the workspace draws from ChaCha8, a
//! counter-based stream generator: the keystream at any counter position is a
//! pure function of (key, counter), so identical seeds give bit-identical
//! draws on every platform and build. Per-item substreams are derived with
//! [`mix`] so samples can be generated independently and in parallel.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The lab-wide deterministic generator.
pub type LabRng = ChaCha8Rng;

/// Build the generator for a given 64-bit seed.
pub fn rng_from_seed(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer. Derives a decorrelated substream seed from a base
/// seed and a counter (sample index, trial index, stage tag, ...).
pub fn mix(seed: u64, counter: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(counter.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
