//! A toy pre-norm Transformer with LoRA adapters, trained with compressed
//! activations.
//!
//! Each unit computes `Z = F(Norm(X)) + X` with RMS normalization and `F`
//! either multi-head self-attention or a two-layer feed-forward block. Frozen
//! weights never change; only adapters (and optionally the normalization
//! scales) train. See [`prenorm`] for the gradient strategies.

mod model;
pub mod prenorm;
mod train;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::compress::CompressError;
use crate::linalg::LinalgError;

pub use model::{
    build_model, pooling_matrix, Activation, AdapterPlacement, Attention, FeedForward, Layer, LoraAdapter, Model, ModelConfig,
    ParamGrads, PreNormUnit, Projection, Sublayer,
};
pub use prenorm::{
    compute_gradients, full_tape_gradients, grad_error, grad_max_rel, prenorm_backward, prenorm_forward, unit_backward_error, Batch, NormImpl,
    StepOutput, Strategy, StoredPreNorm,
};
pub use train::{
    build_task, evaluate_loss, forward_logits, teacher_from, train_loop, train_step, window_means, Optimizer, OptimizerConfig,
    OptimizerKind, TaskConfig, TrainConfig, TrainReport,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, TransformerError>;
