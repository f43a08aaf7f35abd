//! Dense tensors, an eager reverse-mode graph, and a finite-difference
//! gradient checker.

mod gradcheck;
mod graph;
mod registry;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, CheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Backward, Graph, Var};
pub use registry::{Gradients, ParamEntry, ParamId, ParameterRegistry};
pub use tensor::{cosine, matmul, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: zero-norm vector")]
    ZeroNorm { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("objective is non-finite when probing `{param}`")]
    NonFiniteProbe { param: String },
    #[error("{0}")]
    Invalid(String),
}
