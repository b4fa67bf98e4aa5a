//! Seeded randomness.
//!
//! All stochastic behavior in the crate flows from a single u64 seed through
//! these helpers. Derived seeds use a splitmix64-style mix, not the stdlib
//! hasher, so streams are stable across Rust versions and platforms.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Prng = ChaCha8Rng;

/// Stable 64-bit mix (splitmix64 finalizer).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for a named stream, e.g. per-subject or per-epoch.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream.wrapping_add(0xA076_1D64_78BD_642F)))
}

pub fn rng_from(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Standard-normal draws.
pub fn randn(rng: &mut Prng, n: usize) -> Vec<f32> {
    let dist = Normal::new(0.0f32, 1.0).expect("unit normal");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Normal draws with the given std.
pub fn randn_scaled(rng: &mut Prng, n: usize, std: f32) -> Vec<f32> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0f32, std).expect("normal");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Uniform draws over [lo, hi).
pub fn uniform(rng: &mut Prng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut Prng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
