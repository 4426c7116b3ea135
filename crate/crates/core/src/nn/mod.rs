//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
pub mod init;
mod layers;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, NormStats, Var};
pub use layers::{blend_rows, dropout, linear, lstm_step, LstmCellState, LstmParams, LstmVars};
pub use tensor::Tensor;


#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch normalization needs at least two rows in training mode")]
    DegenerateBatch,
    #[error("symbol id out of range at position {0}")]
    IdOutOfRange(usize),
    #[error("attention over empty memory")]
    EmptyMemory,
    #[error("non-finite gradient at input {input}, coordinate {index}")]
    NonFiniteGradient { input: usize, index: usize },
}

/// Row-major `c = a · b` for `a: [m×k]`, `b: [k×n]`.
pub(crate) fn tensor_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    tensor::gemm(m, k, n, a, b, c, false);
}
