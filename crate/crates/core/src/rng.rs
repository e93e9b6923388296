//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`SeededRng`], ChaCha with 8
//! rounds as implemented by `rand_chacha`. Its output stream is fixed by the
//! algorithm, so a seed fully determines datasets, initial weights, shuffles
//! and augmentation draws. Independent streams are derived from one master
//! seed with [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// SplitMix64 finalizer applied to `seed ^ stream`; used to give each
/// consumer (init, shuffle, augmentation, ...) its own stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, stream: u64) -> SeededRng {
    seeded(derive_seed(seed, stream))
}
