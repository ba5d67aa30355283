//! Seed derivation for independent random streams.
//!
//! A stream seed is `mix(parent, tag)`:
//!
//! ```text
//! splitmix64(z) = let z = z + 0x9E3779B97F4A7C15;
//!                 z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//!                 z = (z ^ (z >> 27)) * 0x94D049BB133111EB;
//!                 z ^ (z >> 31)                       (wrapping u64 arithmetic)
//! mix(parent, tag) = splitmix64(parent ^ splitmix64(tag))
//! ```
//!
//! Streams are ChaCha8 generators seeded with the 64-bit result. Changing
//! any of this changes every generated dataset.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(z: u64) -> u64 {
    let z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(parent: u64, tag: u64) -> u64 {
    splitmix64(parent ^ splitmix64(tag))
}

pub fn mix_all(parent: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(parent, |acc, &t| mix(acc, t))
}

pub fn stream(parent: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_all(parent, tags))
}

/// Domain tags keeping unrelated streams apart.
pub mod tag {
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const MASK: u64 = 0x4d41_534b;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const AUGMENT: u64 = 0x4155_474d;
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const DROPOUT: u64 = 0x4452_4f50;
    pub const MC: u64 = 0x4d43_4d43;
}
