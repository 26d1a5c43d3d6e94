//! Named, independent random streams derived from a run seed.
//!
//! Every consumer of randomness (partitioning, noise, client sampling,
//! per-round augmentation, ...) draws from its own stream so that turning a
//! feature off never shifts the draws seen by any other feature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub mod tag {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SAMPLING: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const STUDENT_AUG: u64 = 8;
    pub const TEACHER_AUG: u64 = 9;
    pub const PSEUDO_AUG: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a stream from `seed` and a path of discriminators such as
/// `[tag::SHUFFLE, round, client]`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    ChaCha8Rng::seed_from_u64(h)
}
