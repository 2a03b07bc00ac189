//! A small causal transformer with manual backpropagation, LoRA adapters,
//! masked cross-entropy, AdamW and a generic training loop.

use thiserror::Error;

pub mod checkpoint;
pub mod lora;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointError, NamedTensor};
pub use lora::{
    lora_backward, lora_effective_weight, LoraConfig, LoraPair, LoraParams, LoraTarget,
};
pub use loss::{masked_cross_entropy, masked_nll_with_grad};
pub use model::{
    backward, forward_cached, lm_forward, BlockParams, ForwardCache, LmConfig, LmParams,
};
pub use optim::{adamw_step, lr_at_step, AdamState, TrainConfig};
pub use train::{train, LossCurve, Trainable};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("embedding width {found} does not match d_model {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("sequence length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("LoRA rank {r} invalid for a {rows}x{cols} weight")]
    LoraRank { r: usize, rows: usize, cols: usize },
    #[error("loss mask selects no tokens")]
    EmptyMask,
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
}
