//! Reverse-mode automatic differentiation over dense 2-D f64 tensors.
//!
//! Just enough machinery to backpropagate a scalar loss through the toy
//! model: matrix product, elementwise arithmetic, tanh, row extraction,
//! concatenation, log-softmax pick and log-sigmoid. All reductions use a
//! fixed left-to-right order so forward and backward results are bitwise
//! deterministic.

pub mod check;
mod tape;
mod tensor;

pub use tape::{GradientMap, NodeId, Tape};
pub use tensor::Tensor;
