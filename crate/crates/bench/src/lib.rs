//! Shared fixtures for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tammatte_core::tam::UrMask;
use tammatte_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform tensor in `[-1, 1)`.
pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Mask with each cell set independently with probability `p`.
pub fn random_mask(h: usize, w: usize, p: f64, rng: &mut ChaCha8Rng) -> UrMask {
    UrMask::from_grid(h, w, (0..h * w).map(|_| rng.gen_bool(p)).collect())
        .expect("grid matches dims")
}
