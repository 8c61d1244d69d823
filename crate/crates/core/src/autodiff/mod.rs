//! Deterministic reverse-mode differentiation over dense `f64` tensors.
//!
//! The engine is define-by-run: every forward pass records its primitive
//! operations on a fresh [`Tape`], and [`Tape::backward`] replays the record
//! in reverse topological order exactly once. Tensors are immutable after
//! creation; [`Tape::stop_gradient`] severs a value from the backward pass so
//! it is treated as a constant downstream.
//!
//! Scope is deliberately small: dense row-major storage, broadcast limited to
//! scalar-with-tensor, no higher-order derivatives. Gradient checking via
//! [`finite_difference_check`] is the primary verification tool, which is why
//! everything is 64-bit.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::{finite_difference_check, FdReport};
pub use params::{AdamHyper, Binding, ParamId, Parameter, Parameters};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use alloc::string::String;
use alloc::vec::Vec;
use thiserror::Error;

/// Errors raised by tape construction and the backward pass.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("{op}: operand shapes {lhs:?} and {rhs:?} do not conform")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: domain error at element {index} (operand {value})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("tensor data length {got} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("parameter name {name:?} registered twice")]
    DuplicateParameter { name: String },
    #[error("non-finite evaluation at parameter {name:?} coordinate {index}")]
    NonFinite { name: String, index: usize },
}
