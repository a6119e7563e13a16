//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Tensor`] values during a
//! forward pass. [`Tape::backward`] then walks the recording in reverse once
//! and returns gradients for every node registered with [`Tape::param`].
//! Tapes are cheap to build and are meant to be thrown away after each
//! gradient evaluation.
//!
//! ```
//! use tnsde_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
//! let sq = tape.square(w).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
//! ```

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite input value at flat index {index}")]
    NonFiniteInput { index: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),
    #[error("grad check: eps must lie in (0, 1e-2], got {0}")]
    InvalidEps(f64),
    #[error("grad check: objective not finite when probing parameter {param}, entry {index}")]
    ProbeNonFinite { param: usize, index: usize },
}

pub type Result<T> = std::result::Result<T, AdError>;
