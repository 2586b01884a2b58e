//! Deterministic RNG stream derivation.
//!
//! Every random stream is keyed by a tuple of integers (master seed, client
//! id, round, purpose tag), hashed with SplitMix64 into a ChaCha seed. Streams
//! therefore do not depend on execution order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a key tuple into a single 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_F00D_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(parts))
}

/// Purpose tags mixed into stream keys.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const OFFLINE_INIT: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const TRAIN_ONLINE: u64 = 4;
    pub const TRAIN_OFFLINE: u64 = 5;
    pub const MUTUAL: u64 = 6;
    pub const DATA: u64 = 7;
    pub const PARTITION: u64 = 8;
    pub const NOISE: u64 = 9;
    pub const SPLIT: u64 = 10;
    pub const THEORY: u64 = 11;
    pub const GRADCHECK: u64 = 12;
}
