//! Seed derivation.
//!
//! Every random stream in the toolkit is derived from a single global seed by
//! folding a list of integer "path" components through SplitMix64:
//!
//! ```text
//! state = global
//! for part in parts: state = splitmix64(state ^ splitmix64(part + GOLDEN))
//! ```
//!
//! Record-level streams use `derive(global, &[STREAM, record_index, epoch])`,
//! so the same record in the same epoch always gets the same stream no matter
//! which thread processes it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(global: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(global), |state, &part| {
        splitmix64(state ^ splitmix64(part.wrapping_add(GOLDEN)))
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags keep derived seeds for different purposes apart.
pub mod stream {
    pub const MASKING: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const PERTURB: u64 = 5;
    pub const NEGATIVES: u64 = 6;
    pub const SUBSAMPLE: u64 = 7;
    pub const FINETUNE: u64 = 8;
    pub const VOKEN: u64 = 9;
    pub const SYNTH: u64 = 10;
}
