//! Dense tensors with reverse-mode differentiation, Adam/AdamW, learning
//! rate schedules and the checkpoint container.

mod checkpoint;
mod graph;
mod optim;
mod params;
mod schedule;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, OptimizerMeta, FORMAT_VERSION};
pub use graph::{Graph, Var};
pub use optim::{Moments, OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::ParamSet;
pub use schedule::{LrSchedule, ScheduleKind, DEFAULT_MIN_LR};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("every target position is padding")]
    AllPad,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
}
