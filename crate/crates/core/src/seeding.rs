//! Deterministic seed derivation. Every stochastic choice in a run is seeded
//! from the experiment seed plus a tuple of context words, so no RNG state has
//! to be carried across rounds or checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the bytes of a string.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

/// Purpose tags keep streams for different decisions independent.
pub mod purpose {
    pub const SEED_POOL: u64 = 1;
    pub const IMAGE_RANDOM: u64 = 2;
    pub const REGION_RANDOM: u64 = 3;
    pub const TRAIN_SEG: u64 = 4;
    pub const TRAIN_COST: u64 = 5;
    pub const COMMITTEE: u64 = 6;
    pub const GENERATOR: u64 = 7;
    pub const REPETITION: u64 = 8;
    pub const REFERENCE: u64 = 9;
}
