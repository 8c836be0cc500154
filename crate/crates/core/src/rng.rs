//! Seeded randomness.
//!
//! Every stochastic entry point in this crate takes either an explicit seed
//! or a `Rng` handle derived from one, so that whole runs replay
//! bit-identically. Per-sample generators are split off a master seed by a
//! counter scheme: stream `i` of seed `s` is independent of stream `j`.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Root generator for a master seed.
pub fn seed_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for item `index` under `master`. Streams with
/// different indices never overlap, so items can be produced in parallel
/// and in any order without changing the result.
pub fn derive_rng(master: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Standard normal draw via Box-Muller; avoids a distribution-crate
/// dependency and pins the exact sampling algorithm.
pub fn normal(rng: &mut Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fill a buffer with standard normal draws.
pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.gen_range(lo..hi)
}

/// Uniform integer in `[lo, hi]` (inclusive).
pub fn uniform_usize(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// FNV-1a hash; used for vocabulary bucketing and content fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
