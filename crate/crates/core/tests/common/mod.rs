#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snnet_core::model::ModelConfig;
use snnet_core::tensor::Tensor;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random values with magnitude in `[0.2, 1)`, for ops with a kink or a
/// singularity at zero.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn signal(len: usize, seed: u64) -> Vec<f64> {
    uniform(&[len], -0.5, 0.5, seed).into_data()
}

/// A network small enough for fast structural and gradient tests.
pub fn tiny_config() -> ModelConfig {
    ModelConfig { n_fft: 16, hop: 8, channels: [2, 3, 4], ra_blocks: 1, attn_divisor: 2, interaction: true }
}
