//! Dense `f64` tensors, a reverse-mode tape, AdamW and gradient checking.

mod adamw;
mod gradcheck;
mod graph;
mod mlstm;
mod tensor;

pub use adamw::{adamw_step, AdamW, AdamWState, ParamUpdate};
pub use gradcheck::{finite_difference_check, GradCheck};
pub use graph::{log1mexp, log_sigmoid, Gradients, Graph, Var};
pub use mlstm::MlstmState;
pub use tensor::Tensor;

pub(crate) use graph::softmax_in_place;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0}")]
    Invalid(String),
}
