//! Dense `f64` tensors and a computation graph whose backward pass is itself
//! made of graph nodes, so gradients can be differentiated again.

pub mod activation;
pub mod error;
pub mod fd;
pub mod graph;
pub mod tensor;

pub use activation::Activation;
pub use error::{AutodiffError, Result};
pub use fd::finite_diff;
pub use graph::{Bindings, BroadcastKind, Graph, Node, NodeId, Op};
pub use tensor::Tensor;
