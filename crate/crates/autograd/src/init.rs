use rand::Rng;

use crate::float::Float;
use crate::tensor::Tensor;

/// Uniform Xavier/Glorot initialization: `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Float, R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape product matches")
}

pub fn uniform<T: Float, R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape product matches")
}
