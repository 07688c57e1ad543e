//! Dense fp64 tensors, seeded randomness, and reverse-mode differentiation.

mod gradcheck;
mod ops;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_pinned, max_relative_error, relative_error, GradCheckReport,
};
pub use ops::{apply_primitive, sigmoid, softmax, Primitive};
pub use params::{BoundParams, ParamStore};
pub use rng::{glorot_init, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: unsupported rank for shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: expected {expected} operand(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid shape {shape:?}: extents must be positive")]
    BadShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("slice {start}..{end} out of range for shape {shape:?}")]
    SliceRange {
        shape: Vec<usize>,
        start: usize,
        end: usize,
    },
    #[error("{op}: input {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: non-finite input")]
    NonFiniteInput { op: &'static str },
    #[error("expected a single-value tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    BadStep(f64),
    #[error("non-finite objective when perturbing {name}[{index}]")]
    NonFiniteAt { name: String, index: usize },
    #[error("discrete decisions changed when perturbing {name}[{index}]")]
    PatternFlip { name: String, index: usize },
}
