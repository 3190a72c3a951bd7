// `!(x > 0)` rejects NaN as well as non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod models;
pub mod ndcore;
pub mod simulate;
pub mod stochastic;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

/// Double-precision instantiations used by the command-line tool.
pub type Tensor64 = ndcore::Tensor<f64>;
pub type Model64 = inference::Model<f64>;
pub type Dataset64 = data::PerturbDataset<f64>;

pub type Tensor32 = ndcore::Tensor<f32>;
pub type Model32 = inference::Model<f32>;
pub type Dataset32 = data::PerturbDataset<f32>;
