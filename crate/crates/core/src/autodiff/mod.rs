//! Minimal dense tensors with reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::gradient_check;
pub use tape::{Gradients, Mask, Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
