//! Dense tensors and a reverse-mode tape.

mod tape;
mod tensor;

pub use tape::{GradHook, Tape, Var};
pub(crate) use tape::{sigmoid, softplus};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("node {node} is not reachable from output {output}")]
    NotReachable { node: usize, output: usize },
    #[error("gradient hook on node {node} changed the adjoint shape")]
    HookShape { node: usize },
    #[error("unknown node {0}")]
    UnknownNode(usize),
}
