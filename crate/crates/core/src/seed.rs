//! Seed derivation.
//!
//! Every random stream in the workbench is a [`ChaCha8Rng`] keyed by a 64-bit
//! seed mixed from a master seed and a tuple of integers. Streams therefore do
//! not depend on the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used to separate independent purposes drawn from one master seed.
pub mod tag {
    pub const KB: u64 = 0x4b42;
    pub const PROFILE: u64 = 0x5052_4f46;
    pub const SELECT: u64 = 0x53454c;
    pub const UNKNOWN: u64 = 0x554e4b;
    pub const EXTRA: u64 = 0x455854;
    pub const EXTRA_SAMPLE: u64 = 0x4558_5453;
    pub const SITE_PLAN: u64 = 0x5349_5445;
    pub const SITE_CASES: u64 = 0x5343_4153;
    pub const HELDOUT: u64 = 0x484c_4454;
    pub const TRAIN: u64 = 0x5452_4e;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with an ordered list of integers into a new 64-bit seed.
pub fn derive(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, parts: &[u64]) -> ChaCha8Rng {
    rng(derive(master, parts))
}
