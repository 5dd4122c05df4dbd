//! Deterministic seed derivation.
//!
//! Every random stream (a task, a template, a sample's noise) gets its own
//! generator seeded from the run seed and a path of integers, so results do
//! not depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `path` into `base`.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

/// Stream tags keep unrelated uses of the same run seed apart.
pub mod stream {
    pub const TRAIN_TASK: u64 = 1;
    pub const VAL_TASK: u64 = 2;
    pub const TEST_TASK: u64 = 3;
    pub const TEMPLATE: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const INIT: u64 = 7;
}
