use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected a 2-D tensor, got shape {shape:?}")]
    NotMatrix { shape: Vec<usize> },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("rows have different lengths")]
    Ragged,
    #[error("softmax over an empty row")]
    EmptyRow,
    #[error("{op}: index {index} out of range for length {len}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: segment lengths sum to {total}, input has {len} entries")]
    Segments {
        op: &'static str,
        total: usize,
        len: usize,
    },
    #[error("{op} produced a non-finite value")]
    NonFiniteResult { op: &'static str },
    #[error("cannot normalize row {row}: zero norm")]
    ZeroNorm { row: usize },
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("function is not finite at perturbed point (component {component})")]
    NonFiniteProbe { component: usize },
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
