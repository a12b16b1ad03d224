//! Named deterministic random streams.
//!
//! Every stochastic choice in the project draws from a ChaCha8 stream derived
//! from (seed, stream name). Separate names give independent streams, so e.g.
//! caption noise can vary without disturbing scene layouts generated from the
//! same seed.

use crate::hash::fnv1a64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name.as_bytes()))
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
