//! Reverse-mode automatic differentiation on dense `f64` matrices.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] returns the
//! adjoints of every tracked leaf. [`nn`] builds MLPs and Adam on top.

pub mod nn;
pub mod tape;

pub use nn::{clip_grad_norm, grad_norm, stack_rows, Activation, Adam, BoundMlp, Linear, Mlp};
pub use tape::{concat_cols, Gradients, Matrix, Tape, Var};
