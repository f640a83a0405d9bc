//! Dense `f64` arrays, a reverse-mode tape, and an Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use tape::{activation, activation_grad, sigmoid, Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::seed::Rng;

/// Gaussian-initialized `rows×cols` tensor with standard deviation `std`.
pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("nonzero dims")
}

/// `rows×1` column of ones, used to broadcast a bias row through `matmul`.
pub fn ones_column(rows: usize) -> Tensor {
    Tensor::matrix(rows, 1, vec![1.0; rows]).expect("nonzero rows")
}
