//! Named random sub-streams derived from one root seed.
//!
//! Every consumer of randomness (data synthesis, initialisation, negative
//! sampling, augmentation, shuffling) draws from its own stream so that
//! changing one consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const NEGATIVES: &str = "negatives";
pub const AUGMENT: &str = "augment";
pub const SHUFFLE: &str = "shuffle";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit seed for `(root, label, indices…)`.
pub fn derive(root: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(root);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

pub fn rng(root: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, label, indices))
}
