//! Dense tensors with tape-based reverse-mode differentiation.

pub mod checkpoint;
mod gemm;
pub mod gradcheck;
mod graph;
mod tensor;

pub use gemm::{gemm, Layout};
pub use graph::{Function, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {got}", shape.iter().product::<usize>())]
    ValueCount { shape: Vec<usize>, got: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("degenerate softmax row {row}")]
    DegenerateSoftmax { row: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("graph already consumed by a backward pass")]
    GraphConsumed,
    #[error("{0}")]
    InvalidArgument(&'static str),
    #[error("tensor container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
