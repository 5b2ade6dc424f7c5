//! Seeded randomness. Every stochastic step takes an explicit generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Mixes a tag into a seed (splitmix64 finalizer), so independent streams can
/// be derived from one experiment seed.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, tag: u64) -> SimRng {
    SimRng::seed_from_u64(sub_seed(seed, tag))
}

/// Stream tags, kept in one place so no two consumers share a stream.
pub mod tags {
    pub const MODEL_INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const ATTACKERS: u64 = 5;
    pub const STAGE2_LORA: u64 = 6;
    pub const GATE_INIT: u64 = 7;
    pub const CLIENT: u64 = 1_000;
}
