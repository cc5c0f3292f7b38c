//! Seed derivation and small sampling helpers shared by every stochastic stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The rng stream type used across the crate.
pub type StreamRng = ChaCha8Rng;

/// Derives a child seed from a master seed and a stream index (splitmix64 finalizer).
///
/// Used wherever work is split across trajectories, ensemble members or grid
/// cells, so results do not depend on scheduling order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(master: u64, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, index))
}

/// Inverse-CDF draw from a categorical distribution.
///
/// The last index with positive mass absorbs rounding so a row summing to
/// `1 - 1e-16` never falls off the end.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// One Dirichlet(1, ..., 1) draw of length `n`.
pub fn dirichlet_ones<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            -(1.0 - u).ln()
        })
        .collect();
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / n as f64; n];
    }
    for x in &mut v {
        *x /= total;
    }
    v
}
