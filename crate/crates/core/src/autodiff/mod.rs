//! Dense 64-bit tensors and a reverse-mode tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{CustomBackward, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
