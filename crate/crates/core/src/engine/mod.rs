//! Minimal dense reverse-mode differentiation.
//!
//! Graphs are rebuilt for every forward pass. Leaves are created with
//! [`Graph::param`] (trainable) or [`Graph::constant`]; every op checks its
//! operand shapes and rejects non-finite results, so a failing forward pass
//! names the op that produced the bad value.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{central_difference, grad_check, GradCheckReport, FD_STEP};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// `-log softmax(logits)[y]` for a `1 × C` row, computed through a
/// max-shifted log-sum-exp.
pub fn cross_entropy<'g>(logits: Var<'g>, y: usize) -> Result<Var<'g>, EngineError> {
    if logits.rows() != 1 || y >= logits.cols() {
        return Err(EngineError::IndexOutOfRange {
            index: y,
            len: logits.cols(),
        });
    }
    let m = logits.value().data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = logits.add_scalar(-m)?;
    shifted.exp()?.sum()?.ln()?.sub(shifted.at(0, y)?)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: [usize; 2], len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: [usize; 2] },
    #[error("softmax row {row} has no unmasked, positively weighted entry")]
    EmptySoftmaxRow { row: usize },
    #[error("softmax weights must be non-negative")]
    NegativeWeight,
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}
