//! Seed derivation. Every random stream is a ChaCha8 generator seeded with
//! `derive_seed(seed, stream, index)`, so results depend only on the user
//! seed and never on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers. These values are part of the reproducibility contract.
pub mod stream {
    pub const SYNTH_DEFORMATIONS: u64 = 1;
    pub const SYNTH_SAMPLE: u64 = 2;
    pub const SYNTH_POSE_LAYOUT: u64 = 3;
    pub const CD_INIT: u64 = 10;
    pub const CD_SHUFFLE: u64 = 11;
    pub const CD_GIBBS: u64 = 12;
    pub const AUGMENT: u64 = 20;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
