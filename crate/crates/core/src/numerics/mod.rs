//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, PairMask, PoolOp, SimKind, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
