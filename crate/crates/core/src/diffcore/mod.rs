//! Dense tensors with reverse-mode differentiation and an Adam optimizer.
//!
//! Every learned component in the crate builds its forward pass on a [`Graph`],
//! calls [`Graph::backward`] once, and feeds the gradients to
//! [`ParamStore::adam_step`].

mod checkpoint;
mod graph;
mod ops;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use graph::{Gradients, Graph};
pub use ops::OpKind;
pub use params::{clip_grad_norm, glorot, Adam, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("loss must have exactly one element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor belongs to a different graph")]
    ForeignTensor,
    #[error("backward already ran on this graph")]
    GraphConsumed,
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
