//! Weight initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// ReLU-oriented variance scaling: samples ~ Normal(0, 2/fan_in).
pub fn he_init<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    assert!(fan_in > 0, "he_init: fan_in must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}
