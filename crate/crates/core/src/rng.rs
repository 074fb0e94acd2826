//! Seeded randomness.
//!
//! All stochastic routines take an explicit 64-bit seed and build a ChaCha8
//! stream from it, so every result is a pure function of its inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed for sub-task `index` (restart, trial,
/// stage) of a run seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
