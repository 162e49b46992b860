//! Dense 2-D arrays with reverse-mode differentiation.
//!
//! Arrays are recorded on a [`Tape`] when they descend from a variable
//! created with [`Tape::var`]. A backward sweep can optionally record its own
//! gradient computations ([`grad`] with `create_graph`), which allows one more
//! level of differentiation: enough for penalties on input gradients.
//!
//! ```
//! use sparseprior_core::ndgrad::{Matrix, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.var(&Matrix::scalar(3.0));
//! let y = x.square().unwrap();
//! let grads = y.backward().unwrap();
//! assert_eq!(grads.get(&x).item(), 6.0);
//! ```

mod matrix;
mod ops;
mod tape;

pub use matrix::{Matrix, Shape};
pub use tape::{grad, grad_nested, DiffArray, Gradients, Tape};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Shape, len: usize },
    #[error("{op} of a negative input")]
    NegativeInput { op: &'static str },
    #[error("division by zero")]
    DivisionByZero,
    #[error("backward needs a single-element array, got shape {0:?}")]
    NotScalar(Shape),
    #[error("operands recorded on different tapes")]
    TapeMismatch,
    #[error("{0} has no second-derivative rule")]
    NoSecondDerivative(&'static str),
    #[error("{0} has no derivative rule")]
    NoDerivative(&'static str),
    #[error("gradient nesting deeper than two levels")]
    NestingTooDeep,
}

#[cfg(test)]
mod tests;
