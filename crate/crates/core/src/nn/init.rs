//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Normal(0, std) truncated to ±2 std.
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// Uniform(-b, b) with `b = sqrt(6 / fan_in)` (He uniform).
pub fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let b = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-b..b)).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}
