//! Oracles shared by the integration suites and the acceptance run.
#![allow(dead_code)]

pub mod full_loss;
pub mod ops;
pub mod quant;

use hrvq::seeded_rng;
use hrvq::tensor::Tensor;
use rand::Rng as _;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

/// Values bounded away from zero so ReLU kinks stay outside the probe.
pub fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.random_range(0.1f32..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}
