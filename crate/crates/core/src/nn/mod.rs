//! A small CPU network core: 1-D convolutions, batch norm, residual blocks,
//! pooling and dense layers with exact reverse-mode gradients.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod checkpoint;
mod exec;
mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod schedule;
mod tensor;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, OptimizerState, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use exec::{backward, forward, infer, Gradients, Mode, Tape};
pub use gradcheck::{
    analytic_gradients, check_against, grad_check, GradCheckReport, LossFn, REL_ERROR_FLOOR,
};
pub use graph::{init_params, GraphSpec, LayerSpec, ParamInit, ParamSpec, Shortcut};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState, SgdState};
pub use schedule::Schedule;
pub use tensor::{cast_map, Scalar, Tensor, TensorMap};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: Vec<usize>,
    },
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}
