//! Learned surrogates for the thermoelastic ground truth.
//!
//! [`model`] holds the multi-task attention U-Net and the single-task
//! baseline, built on a small reverse-mode [`tape`]. [`training`] assembles
//! data and physics losses, balances tasks, runs the optimizer loop, and
//! evaluates MAE/MRE. [`checkpoint`] persists trained models.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod training;

pub use model::{attention_gate, GateParams, Mode, ModelConfig, UNet, OUTPUT_FIELDS, TASK_GROUPS};
pub use tensor::Tensor;
pub use training::{
    evaluate, train, Balance, Batch, Dataset, Gradients, History, LossBreakdown, Metrics, ModelKind, NormStats, Objective, Surrogate,
    TrainConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate dataset: {0}")]
    Degenerate(String),
    #[error("training diverged at epoch {epoch}, step {step}: total loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] thermo_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
