//! Seeded parameter initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::nnops::ConvParams;
use crate::tensor::{Element, Tensor};

/// Gaussian(0, sqrt(2 / fan_in)) resampled until within two standard deviations.
pub fn truncated_he<T: Element, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::from_f64_lossy(v);
        }
    })
}

pub fn conv<T: Element, R: Rng + ?Sized>(
    rng: &mut R,
    kernel: [usize; 3],
    c_in: usize,
    c_out: usize,
    stride: [usize; 3],
) -> ConvParams<T> {
    let fan_in = kernel.iter().product::<usize>() * c_in;
    let k = truncated_he(rng, &[kernel[0], kernel[1], kernel[2], c_in, c_out], fan_in);
    ConvParams::new(k, Tensor::zeros(&[c_out]), stride).expect("valid conv shape")
}
