//! Dense tensors, losses and the finite-difference gradient oracle.

pub mod gradcheck;
pub mod init;
pub mod loss;
mod tensor;

pub use gradcheck::{finite_difference_grad, finite_difference_grad_f32, relative_error};
pub use loss::{softmax, softmax_cross_entropy, softmax_margin};
pub use tensor::{identity, BinaryOp, Operand, Real, Tensor};
