//! Dense tensors, reverse-mode differentiation, seeded sampling and the
//! optimizer used by every training loop in the crate.

mod fd;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use fd::{finite_diff_grad, relative_error};
pub use optim::{AdamW, AdamWConfig};
pub use rng::{sample_gaussian, RngStream};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor is not on the gradient tape")]
    NotOnTape,
    #[error("finite difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("function evaluation is not finite at coordinate {coordinate}")]
    NonFinite { coordinate: usize },
}
