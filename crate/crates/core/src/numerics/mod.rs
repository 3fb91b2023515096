//! Dense matrices, probability helpers, seeded randomness and a central
//! finite-difference gradient oracle.
//!
//! Everything here is `f64`. Sizes in this crate are desk scale (tens of
//! rows and columns), so the implementations favour clarity over blocking
//! or SIMD tricks.

mod gradcheck;
mod prob;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error, DEFAULT_FD_STEP};
pub use prob::{cosine_sim, dot, l2_norm, log_softmax, shannon_entropy, softmax_temp, Distribution};
pub use rng::RngState;
pub use tensor::{matmul, Tensor2D};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("zero-norm vector passed to cosine similarity")]
    ZeroNorm,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
