//! Dense `f64` tensors and a define-by-run reverse-mode autodiff graph.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{Graph, Var, LN_EPS};
pub(crate) use graph::window_map;
#[allow(unused_imports)]
pub(crate) use tensor::{for_each_index, strides};
pub use tensor::Tensor;
