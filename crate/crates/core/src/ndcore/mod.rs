//! Dense tensors, a reverse-mode autodiff tape and the small network layer
//! built on top of it.

mod graph;
mod nn;
mod scalar;
pub mod gradcheck;
pub mod special;
mod tensor;

pub use graph::{log_sum_exp, sigmoid, softmax_in_place, softplus, softplus_inv, Gradients, Graph, Var};
pub use nn::{build_residual_mlp, orthogonal_matrix, Bound, Init, ParamId, ParamStore, ResidualMlp, LEAKY_SLOPE};
pub use scalar::Scalar;
pub use tensor::{broadcast_shape, Tensor};

#[cfg(test)]
mod tests;
