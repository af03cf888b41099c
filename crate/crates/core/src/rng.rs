//! Counter-based seeding.
//!
//! Every random draw in training is keyed by `(seed, step, stream)` so any
//! step can be replayed in isolation and independent draws never share a
//! generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags used by the trainers.
pub mod stream {
    pub const VIEW_1: u64 = 1;
    pub const VIEW_2: u64 = 2;
    pub const NEGATIVES: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const NEIGHBORS: u64 = 5;
    pub const INIT_ONLINE: u64 = 6;
    pub const INIT_TARGET: u64 = 7;
    pub const INIT_HEAD: u64 = 8;
    pub const SPLIT: u64 = 9;
    pub const PROBE: u64 = 10;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes the three counters into a single 64-bit seed.
pub fn derive_seed(seed: u64, step: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ step) ^ stream.rotate_left(17))
}

pub fn stream_rng(seed: u64, step: u64, stream: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, step, stream))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
