//! Minimal reverse-mode autodiff and the layers built on it. Everything is
//! f64 and single-threaded; graphs are cheap to build per step and dropped
//! afterwards.

pub mod adam;
pub mod backbone;
pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use backbone::{backbone, init_backbone, BackboneConfig};
pub(crate) use backbone::{init_res_block, res_block};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use params::{add_conv, add_linear, he_normal, Binder, CheckpointError, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: {detail}")]
    BadShape { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter name {0:?} is empty or contains whitespace")]
    BadParamName(String),
}
