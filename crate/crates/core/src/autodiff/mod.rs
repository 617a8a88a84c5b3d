//! Numeric substrate: dense tensors, a reverse-mode tape, AdamW and a
//! warmup-cosine learning-rate schedule.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckError, GradCheckReport};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use tape::{Gradients, Segment, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range ({len}) in {op}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("{0}")]
    Invalid(String),
}
