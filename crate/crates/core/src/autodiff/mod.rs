//! Minimal tensor autodiff supporting gradients of gradients.

mod tensor;
mod var;

pub use tensor::{broadcast_shapes, unfold_len, Tensor};
pub use var::{grad, NoGradGuard, Var};

#[cfg(test)]
mod tests;
