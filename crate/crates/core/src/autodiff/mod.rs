//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! The primitives are exactly what the pruning engine consumes: dense
//! elementwise arithmetic, matmul, 2-D convolution, reductions, (log-)softmax
//! over the last axis, axis broadcast, slicing, and a suffix sum. Three
//! features matter beyond a textbook tape:
//!
//! * [`Tape::detach`] copies a value into a constant, cutting the graph.
//! * [`Tape::backward`] takes an explicit target set and only propagates
//!   through nodes that depend on a target.
//! * The tape is read-only during backward, so several backward passes with
//!   different roots may run over one forward graph.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{GradientMap, Tape, Var};
pub use tensor::Tensor;
