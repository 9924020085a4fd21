//! Seeded random streams.
//!
//! Every stochastic component draws from xoshiro256++ seeded through
//! splitmix64, so a seed recorded in a manifest fully determines a run.
//! Independent streams (per episode, per trial, per oracle instance) are
//! derived with [`derive_seed`] instead of sharing one generator.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

pub type Rng = Xoshiro256PlusPlus;

/// Name recorded in manifests and run artifacts.
pub const PRNG_NAME: &str = "xoshiro256++ (splitmix64 seeding)";

pub fn rng_from_seed(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Seed of the `stream`-th child of `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut sm = SplitMix64::seed_from_u64(base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    sm.next_u64();
    sm.next_u64()
}

pub fn child_rng(base: u64, stream: u64) -> Rng {
    rng_from_seed(derive_seed(base, stream))
}

/// Sample from a flat Dirichlet of dimension `dim` (normalized unit exponentials).
pub fn flat_dirichlet(rng: &mut Rng, dim: usize) -> Vec<f64> {
    use rand_distr::{Distribution, Exp1};
    let mut v: Vec<f64> = (0..dim).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    } else {
        v.iter_mut().for_each(|x| *x = 1.0 / dim as f64);
    }
    v
}
