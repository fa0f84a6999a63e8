//! Dense tensors, reverse-mode differentiation, loss and optimizer primitives.

mod gradcheck;
mod graph;
mod param;
mod tensor;

use thiserror::Error;

pub use gradcheck::gradient_check;
pub use graph::{AttentionMask, Graph, Var};
pub use param::{Adam, ParamId, ParamStore, Parameter};
pub use tensor::{log_softmax, softmax_in_place, Tensor};

/// Epsilon used by every layer normalization in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: empty dimension")]
    EmptyDimension { op: &'static str },
    #[error("{len} values cannot fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("attention query {row} of batch element {batch} has no admissible key")]
    DegenerateMask { batch: usize, row: usize },
    #[error("cross-entropy target is padding at every position")]
    AllPadding,
    #[error("target id {id} outside vocabulary of size {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("row id {id} outside table of {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },
    #[error("parameter {0} has no gradient; run a backward pass first")]
    MissingGradient(String),
    #[error("parameter name {0} is already registered")]
    DuplicateParameter(String),
}

/// Label-smoothed cross-entropy over a token sequence; positions holding
/// `pad_id` are excluded from the mean.
pub fn cross_entropy_label_smoothed(
    g: &mut Graph,
    logits: Var,
    targets: &[u32],
    smoothing: f64,
    pad_id: u32,
) -> Result<Var, NumericsError> {
    let targets: Vec<Option<usize>> = targets
        .iter()
        .map(|&t| (t != pad_id).then_some(t as usize))
        .collect();
    g.cross_entropy(logits, &targets, smoothing)
}
