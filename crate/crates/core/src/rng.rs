//! Seeded random streams. Every stochastic component derives its generator
//! from an explicit 64-bit seed so replicates can be regenerated independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed of replicate `replicate` under a base seed.
pub fn replicate_seed(base_seed: u64, replicate: usize) -> u64 {
    base_seed ^ replicate as u64
}

/// Derives an independent sub-stream seed for a named purpose.
pub(crate) fn derive(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) mod stream {
    pub const SPLIT: u64 = 1;
    pub const MODEL_INIT: u64 = 2;
    pub const SAMPLER: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const BALANCE: u64 = 6;
}
