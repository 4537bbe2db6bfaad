//! Seeded parameter initialization.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform(-bound, bound) with bound = 1/sqrt(fan_in), the usual default
/// for conv and linear layers.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("init shape")
}

pub fn conv_weight(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, kh: usize, kw: usize) -> ArrayD<f64> {
    fan_in_uniform(rng, &[c_out, c_in, kh, kw], c_in * kh * kw)
}

pub fn conv_bias(rng: &mut ChaCha8Rng, c_out: usize, fan_in: usize) -> ArrayD<f64> {
    fan_in_uniform(rng, &[c_out], fan_in)
}

pub fn linear_weight(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> ArrayD<f64> {
    fan_in_uniform(rng, &[d_in, d_out], d_in)
}

pub fn linear_bias(rng: &mut ChaCha8Rng, d_out: usize, fan_in: usize) -> ArrayD<f64> {
    fan_in_uniform(rng, &[d_out], fan_in)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(ndarray::IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(ndarray::IxDyn(shape))
}
