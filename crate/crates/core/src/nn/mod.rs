//! Minimal tensor math and reverse-mode differentiation.

mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("internal error: {0}")]
    Internal(String),
}
