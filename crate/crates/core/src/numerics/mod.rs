//! Dense tensors, a reverse-mode tape, finite-difference checking and the
//! binary checkpoint container.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_container, write_container, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use gradcheck::{grad_check, grad_check_fn, grad_check_params, relative_error, sample_coords};
pub use params::{Bound, ParamStore};
pub use tape::{log_sum_exp, Gradients, Tape, Var};
#[allow(unused_imports)]
pub(crate) use tape::argmax;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("function value is not finite: {0}")]
    NonFinite(f64),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}
