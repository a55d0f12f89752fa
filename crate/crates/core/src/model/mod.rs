//! A small decoder-only transformer with linear binary input/output
//! projections instead of a token vocabulary, plus the full pretraining
//! schedule, frozen-backbone finetuning, and attention capture.
//!
//! All arithmetic is f64 and sequential per run, so training histories and
//! checkpoints are bit-reproducible given identical seeds and data.

mod checkpoint;
mod net;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_file, save_checkpoint, save_checkpoint_file, ModelCheckpoint, Provenance};
pub use net::{
    backward, forward, AttentionTrace, BatchInput, BlockParams, Cache, ForwardOut, HeadParams,
    HeadSpec, Model, Params,
};
pub use optim::{clip_global_norm, AdamW, LrSchedule};
pub use train::{
    attention_probe, efficiency, evaluate, final_hidden, finetune_frozen, grad_check,
    train_pretrain, train_task, AccuracyKind, EvalMetrics, TaskData, TrainHistory,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape contract violated: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("frozen backbone drifted during finetuning")]
    FrozenDrift,
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture of the backbone and its default binary head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub input_width: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: far below GPT-2 but the identical mechanism.
    pub fn desk_scale(input_width: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            context_len: 60,
            input_width,
            dropout: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len < 2 {
            return Err(ModelError::Config("context_len must be >= 2".into()));
        }
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.input_width == 0 {
            return Err(ModelError::Config("zero-sized dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// The full optimization schedule for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// fraction of total optimizer steps spent in linear warmup
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub clip_norm: f64,
    pub max_epochs: usize,
    /// early stopping on validation loss
    pub patience: usize,
    pub min_delta: f64,
    /// fraction of samples held out for validation
    pub val_frac: f64,
    /// optional stop once this validation accuracy is reached, for
    /// epochs-to-threshold efficiency measurements
    pub stop_at_accuracy: Option<f64>,
    /// which accuracy drives `stop_at_accuracy` and efficiency
    pub accuracy_kind: AccuracyKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-6,
            lr_min: 0.0,
            weight_decay: 0.01,
            warmup_frac: 0.10,
            batch_size: 64,
            grad_accum_steps: 1,
            clip_norm: 1.0,
            max_epochs: 10_000,
            patience: 20,
            min_delta: 1e-4,
            val_frac: 0.1,
            stop_at_accuracy: None,
            accuracy_kind: AccuracyKind::PerCell,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.lr <= 0.0
            || self.batch_size == 0
            || self.grad_accum_steps == 0
            || self.clip_norm <= 0.0
            || self.max_epochs == 0
        {
            return Err(ModelError::Config("non-positive training parameter".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(ModelError::Config("warmup_frac must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(ModelError::Config("val_frac must be in [0, 1)".into()));
        }
        Ok(())
    }
}
