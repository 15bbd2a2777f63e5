//! Weight initialization helpers.

use rand::Rng;
use tsd_core::Tensor;

/// Normal(0, sigma) truncated to two standard deviations by resampling.
pub fn trunc_normal(rng: &mut impl Rng, shape: Vec<usize>, sigma: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            data.push(sigma * z);
        }
    }
    Tensor::new(shape, data).expect("finite by construction")
}

pub fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape)
}

pub fn ones(shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![1.0; n]).expect("finite")
}
