//! Seed derivation shared by every randomized component.
//!
//! All randomness flows from a single 64-bit base seed. Child seeds are
//! derived with the SplitMix64 finalizer so that ensemble member `i` of a run
//! seeded with `s` always sees `mix(s, i)`, independent of scheduling:
//!
//! ```text
//! z = base + (index + 1) * 0x9E3779B97F4A7C15   (wrapping)
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! mix = z ^ (z >> 31)
//! ```
//!
//! Generators are ChaCha8 seeded through `SeedableRng::seed_from_u64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer applied to `base + (index + 1) * gamma`.
pub fn mix(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags for the independent generators a training run consumes.
pub(crate) mod stream {
    pub const INIT: u64 = 0x1;
    pub const SHUFFLE: u64 = 0x2;
    pub const ATTACK: u64 = 0x3;
    pub const DP_NOISE: u64 = 0x4;
    pub const MEMBERSHIP: u64 = 0x5;
    pub const EVAL: u64 = 0x6;
}
