//! Seeded generators for reproducible test tensors and weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Dims4, Layout, Matrix, Tensor};

pub type SeededRng = ChaCha8Rng;

pub const DEFAULT_SEED: u64 = 42;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values drawn uniformly from [-1, 1).
pub fn uniform_vec(len: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub fn uniform_tensor(dims: Dims4, layout: Layout, rng: &mut impl Rng) -> Tensor {
    Tensor::new(
        vec![dims.n, dims.c, dims.h, dims.w],
        layout,
        uniform_vec(dims.len(), rng),
    )
    .expect("dims match data")
}

pub fn uniform_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::new(rows, cols, uniform_vec(rows * cols, rng)).expect("dims match data")
}

/// Small integers in [-range, range]; handy for forcing ties in norm comparisons.
pub fn integer_matrix(rows: usize, cols: usize, range: i32, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-range..=range) as f32)
}
