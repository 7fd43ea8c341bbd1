//! Seeded random streams.
//!
//! Every random draw in the crate comes from a xoshiro256++ generator seeded
//! through SplitMix64, so results are reproducible across platforms. A single
//! user seed fans out into independent streams via [`derive_seed`].

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

pub type SeededRng = Xoshiro256PlusPlus;

/// Named sub-seed streams fanned out from one top-level seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Mask = 3,
    Order = 4,
    Noise = 5,
    GradCheck = 6,
}

pub fn rng_from_seed(seed: u64) -> SeededRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Mixes `(seed, stream, index)` into a fresh 64-bit seed.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut sm = SplitMix64::seed_from_u64(seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let a = sm.next_u64();
    let mut sm = SplitMix64::seed_from_u64(a ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    sm.next_u64()
}

pub fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn normal(rng: &mut SeededRng, mean: f64, std: f64) -> f64 {
    Normal::new(mean, std)
        .expect("standard deviation must be finite and non-negative")
        .sample(rng)
}
