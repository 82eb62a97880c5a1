use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{len} values cannot fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op} expects a {expected} operand")]
    Kind {
        op: &'static str,
        expected: &'static str,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("real transform needs even spatial axes, got {0}x{1}")]
    OddSpatial(usize, usize),
    #[error("{modes} retained modes exceed the {extent}-point axis")]
    ModesTooLarge { modes: usize, extent: usize },
    #[error("relative error undefined for a zero-norm target")]
    ZeroNormTarget,
}
