//! Parameter initialization.

use avau_tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform with variance `gain² / fan_in`: gain 1 keeps activations at unit
/// scale through a linear map, `RELU_GAIN` through one followed by a ReLU.
pub fn fan_in_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.random_range(-bound..bound))).expect("positive shape")
}

pub const LINEAR_GAIN: f64 = 1.0;
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape.to_vec()).expect("positive shape")
}

pub fn ones<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape.to_vec(), T::one()).expect("positive shape")
}

pub fn constant<T: Scalar>(shape: &[usize], v: f64) -> Tensor<T> {
    Tensor::full(shape.to_vec(), T::from_f64_lossy(v)).expect("positive shape")
}
