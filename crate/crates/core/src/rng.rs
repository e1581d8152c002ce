//! Seeded random streams. Every stochastic step derives its generator from
//! the run seed plus a fixed stream tag, so results never depend on call order
//! across unrelated components.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, tag: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

pub fn normal(rng: &mut Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

pub fn normal_vec(rng: &mut Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| normal(rng, std)).collect()
}
