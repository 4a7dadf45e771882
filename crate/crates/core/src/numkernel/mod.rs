//! Dense numeric foundation: matrices, activations, a reverse-mode tape,
//! Adam, and seeded randomness.

mod adam;
pub mod autodiff;
mod matrix;
pub mod ops;
pub mod seed;

pub use adam::Adam;
pub use autodiff::{Gradients, Tape, Var};
pub use matrix::{argmax, log_sum_exp, softmax, softmax_in_place, Matrix};
pub use ops::{bce_with_logits, sigmoid, sigmoid_scalar};
