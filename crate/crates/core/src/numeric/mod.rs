//! Dense tensors with tape-based reverse-mode differentiation, restricted to
//! the operations the embedding, probe and policy networks need.

mod adam;
pub mod checkpoint;
mod conv;
mod gradcheck;
mod graph;
mod param;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use gradcheck::gradcheck;
pub use graph::{Gradients, Graph, Var};
pub use param::{he_uniform, ParamId, ParamStore, Parameter};
pub use scalar::{matmul, Scalar};
pub use tensor::{stack, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not match buffer of length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParameter(String),
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NumericError> = std::result::Result<T, E>;
