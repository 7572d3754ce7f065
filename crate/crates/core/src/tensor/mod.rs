//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Only the kernels the transformer, the routers and the losses need are
//! provided. Gradients are checked against central finite differences in
//! `tests/gradients.rs`.

mod float;
mod graph;
#[allow(clippy::module_inception)]
mod tensor;

pub use float::{gemm, Float};
pub use graph::{Graph, SeqLayout, Var};
pub use tensor::{Param, Tensor};

pub(crate) use graph::{argmax_prefer_last, log_sum_exp, softmax_in_place};
