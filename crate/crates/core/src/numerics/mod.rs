//! Dense tensors, reverse-mode differentiation and the finite-difference
//! oracle used to verify it.

pub mod check;
pub mod graph;
pub mod tensor;

pub use check::{check_all_primitives, check_primitive, finite_diff_grad, relative_error, PrimitiveReport};
pub use graph::{Gradients, Graph, Primitive, Var};
pub use tensor::{DType, Scalar, Tensor};
