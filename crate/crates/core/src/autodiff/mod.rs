//! Eager, tape-based reverse-mode differentiation over [`Matrix`](crate::Matrix) values.
//!
//! Every operation computes its output immediately and appends a node to the
//! [`Tape`]. [`Tape::backward`] walks the nodes once in reverse and returns
//! gradients only for leaves created with `requires_grad = true`.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error, DEFAULT_FD_EPS};
pub use tape::{Gradients, Tape, Var};
