#![allow(dead_code)]

pub mod encoder_checks;
pub mod gradient_checks;
pub mod metric_checks;
pub mod reference;

use ast_core::numeric::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows().map(<[f64]>::to_vec).collect()
}
