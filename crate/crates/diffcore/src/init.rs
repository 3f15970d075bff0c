//! Parameter initialization.

use crate::tensor::Tensor;
use crate::Scalar;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He (fan-in) normal initialization: `N(0, 2 / fan_in)`.
pub fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng)))
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual recurrent-layer
/// default.
pub fn uniform_fan_in<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}
