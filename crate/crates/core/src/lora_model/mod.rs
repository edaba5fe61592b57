//! Frozen toy base model with per-layer LoRA adapters, the synthetic non-IID
//! classification task, local training and evaluation.

mod model;
mod reference;
mod task;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{
    backward_stack, effective_rank, forward_stack, forward_with_adapters, materialize, Activation, AdapterGrad,
    AdapterSet, BaseModel, FrozenLayer, LoraAdapter, StackCache,
};
pub use reference::{centroid_run, local_only_run, pretrained_quality};
pub use task::{
    apportion, build_teacher, generate_shard, generate_task, generate_test, pretrained_base, SampleOrigin,
    SyntheticTask, TaskConfig, TaskShard,
};
pub use train::{
    add_prox_gradient, argmax, batch_schedule, evaluate, evaluate_base, evaluate_logits, local_train_step,
    loss_and_grads, prox_penalty, train_on_schedule, AdapterOptimizer, Dataset, EvalResult, Prox, TrainingConfig,
    DEFAULT_SCENARIO_LEARNING_RATE,
};

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum LoraError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, LoraError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    /// Requested LoRA rank; clamped per layer to `min(in, out)`.
    pub rank: usize,
    /// Scaling numerator. `None` means alpha equals the rank.
    pub alpha: Option<f64>,
    /// Standard deviation of the Gaussian used for A.
    pub init_std: f64,
    pub teacher_gain: f64,
    /// Weight noise separating the frozen base from the teacher.
    pub pretrain_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dims: vec![32, 32],
            num_classes: 4,
            activation: Activation::Tanh,
            rank: 8,
            alpha: None,
            init_std: 0.02,
            teacher_gain: 1.5,
            pretrain_noise: 0.15,
        }
    }
}

impl ModelConfig {
    /// Input width, hidden widths, class count.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(self.num_classes))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) {
            return Err(LoraError::Config("layer widths must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(LoraError::Config("need at least two classes".into()));
        }
        if self.rank == 0 {
            return Err(LoraError::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.init_std >= 0.0) || !(self.teacher_gain > 0.0) || !(self.pretrain_noise >= 0.0) {
            return Err(LoraError::Config("scales must be finite and non-negative".into()));
        }
        if self.alpha.is_some_and(|a| !(a > 0.0)) {
            return Err(LoraError::Config("alpha must be positive".into()));
        }
        Ok(())
    }
}
