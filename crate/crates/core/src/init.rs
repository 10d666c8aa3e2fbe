//! Weight initialization: Kaiming fan-in scaling for conv/fc weights, zeros
//! for biases, gamma 1 / beta 0 for batch norm.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// N(0, sqrt(2 / fan_in)) entries.
pub fn kaiming<S: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data)
}

pub fn conv_weight<S: Scalar, R: Rng>(c_out: usize, c_in: usize, rng: &mut R) -> Tensor<S> {
    kaiming(&[c_out, c_in, 3, 3], c_in * 9, rng)
}

pub fn fc_weight<S: Scalar, R: Rng>(f_out: usize, f_in: usize, rng: &mut R) -> Tensor<S> {
    kaiming(&[f_out, f_in], f_in, rng)
}
