//! Deterministic random fixtures for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::{ImageBuffer, ScalarMap};

pub fn random_map(w: usize, h: usize, seed: u64, lo: f64, hi: f64) -> ScalarMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScalarMap::from_fn(w, h, |_, _| rng.random_range(lo..hi))
}

pub fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBuffer::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
}
