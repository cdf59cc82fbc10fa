//! Counter-based seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! `(base seed, counter, stream tag)`, so results do not depend on the order
//! in which samples, epochs or runs are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a counter and a stream tag into a base seed.
pub fn derive(base: u64, counter: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ counter) ^ stream.rotate_left(32))
}

pub fn rng(base: u64, counter: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, counter, stream))
}

/// Maps a 64-bit hash onto `[0, 1)` using its top 53 bits.
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Stream tags. Changing any of these changes every generated artifact.
pub mod streams {
    pub const TRAJECTORY: u64 = 1;
    pub const REGIME: u64 = 2;
    pub const GPS: u64 = 3;
    pub const VISUAL: u64 = 4;
    pub const CHANNEL: u64 = 5;
    pub const INIT: u64 = 16;
    pub const SHUFFLE: u64 = 17;
    pub const RUN: u64 = 18;
}
