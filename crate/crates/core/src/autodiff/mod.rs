//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is created per training step. Parameters enter as leaves with
//! `requires_grad`, every primitive op appends a node, and
//! [`Tape::backward`] sweeps the nodes in reverse execution order.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{concat, Tape, Var};
pub use tensor::Tensor;
pub(crate) use tensor::matmul_nn;


use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: range {start}..{end} out of bounds for shape {shape:?}")]
    Range {
        op: &'static str,
        start: usize,
        end: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: input {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}
