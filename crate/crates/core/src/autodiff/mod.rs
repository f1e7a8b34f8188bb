//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
