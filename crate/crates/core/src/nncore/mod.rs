//! Minimal differentiable numeric core: dense tensors, a reverse-mode tape,
//! Adam, a finite-difference gradient checker and the checkpoint container.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use optim::{clip_grad_norm, Adam, AdamConfig, AdamState};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{CustomOp, Gradients, RowPlacement, Tape, Var, GATHER_ZERO, LOG_STD_MAX, LOG_STD_MIN};
pub use tensor::Tensor;


use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
