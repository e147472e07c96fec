use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Optimizer, schedule and batching settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_ratio: f64,
    pub epochs: usize,
    /// Maximum global gradient L2 norm.
    pub grad_clip: f64,
    /// Upper bound on the summed sequence lengths of one batch.
    pub batch_size_tokens: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Weight of the load-balancing term; 0 disables it.
    pub aux_loss_coeff: f64,
    /// Force each sample's task expert into every routing. When false the
    /// gate's plain top-K is used in training too (ablation).
    pub task_routing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            epochs: 3,
            grad_clip: 1.0,
            batch_size_tokens: 4096,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            aux_loss_coeff: 0.0,
            task_routing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("grad_clip", self.grad_clip),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("train.{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.aux_loss_coeff >= 0.0) {
            return Err(invalid("train.weight_decay and train.aux_loss_coeff must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(invalid(format!("train.warmup_ratio must be in [0, 1), got {}", self.warmup_ratio)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("train.{name} must be in [0, 1), got {b}")));
            }
        }
        if self.epochs == 0 || self.batch_size_tokens == 0 {
            return Err(invalid("train.epochs and train.batch_size_tokens must be at least 1"));
        }
        Ok(())
    }
}
