//! Parameter initialization.

use rand::Rng;

use crate::autodiff::Tensor;

/// Trainable tensor drawn from `U(-1/√fan_in, 1/√fan_in)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::param(shape, data).expect("shape product matches")
}

pub fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).with_requires_grad(true)
}

/// Bound of the uniform range used for a given fan-in.
pub fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}
