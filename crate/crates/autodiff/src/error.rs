use thiserror::Error;

use crate::graph::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("input node {node:?} ({name}) is not bound")]
    Unbound { node: NodeId, name: String },

    #[error("binding for {node:?} has shape {got:?}, expected {expected:?}")]
    BindingShape {
        node: NodeId,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("node {node:?} ({op}) produced a non-finite value")]
    NonFinite { node: NodeId, op: &'static str },

    #[error("gradient target {node:?} must be scalar-shaped, got {shape:?}")]
    NotScalar { node: NodeId, shape: Vec<usize> },

    #[error("node {0:?} does not belong to this graph")]
    UnknownNode(NodeId),

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("function evaluated to a non-finite value at coordinate {index}")]
    NonFiniteFunction { index: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
