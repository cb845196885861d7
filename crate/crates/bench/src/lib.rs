//! Seeded inputs shared by the benchmarks.

use lcarep_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `h x w x c` map with entries uniform in `[-1, 1)`.
pub fn random_map(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(vec![h, w, c], data).expect("positive dims")
}

/// RGB image with pixels uniform in `[0, 1)`.
pub fn random_image(side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..side * side * 3).map(|_| rng.random::<f32>()).collect();
    Tensor::new(vec![side, side, 3], data).expect("positive dims")
}
