//! Seeded inputs shared by the benchmarks.

use hilo_core::autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-1, 1)`.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

pub fn random_cost(rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..n).map(|_| rng.gen_range(0.0..100.0)).collect()).collect()
}

/// `k` well-separated Gaussian-ish blobs of `per` points in `dim` dimensions.
pub fn blobs(rng: &mut impl Rng, k: usize, per: usize, dim: usize) -> Vec<Vec<f64>> {
    let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
    centres
        .iter()
        .flat_map(|c| {
            (0..per)
                .map(|_| c.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect())
                .collect::<Vec<Vec<f64>>>()
        })
        .collect()
}
