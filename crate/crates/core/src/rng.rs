//! Seeded randomness.
//!
//! Every stream is a xoshiro256** generator whose 256-bit state is filled by
//! SplitMix64 from a 64-bit seed. Sub-streams are derived with
//! [`derive_seed`]:
//!
//! ```text
//! derive_seed(master, stream) = splitmix64(master ^ splitmix64(stream + 0x9E3779B97F4A7C15))
//! ```

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256StarStar as Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The SplitMix64 output function applied to `x + γ`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_add(GOLDEN_GAMMA)))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Named sub-streams so unrelated consumers never share a sequence.
pub mod streams {
    pub const DOMAIN_SPEC: u64 = 0x1000;
    pub const DOMAIN_SAMPLES: u64 = 0x2000;
    pub const ENCODER_INIT: u64 = 0x3000;
    pub const TRAINING: u64 = 0x4000;
    pub const TRIPLETS: u64 = 0x5000;
}
