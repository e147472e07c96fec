use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::moe::TaskWeighting;

/// Shape and hyperparameters of the decoder-only MoE transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of each SwiGLU expert.
    pub d_ff: usize,
    pub n_experts: usize,
    /// Experts per token at inference.
    pub top_k: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub rms_eps: f64,
    /// Weighting of the task-forced expert pair during training.
    pub task_weighting: TaskWeighting,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 80,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            n_experts: 4,
            top_k: 2,
            max_seq_len: 256,
            rope_base: 10_000.0,
            rms_eps: 1e-5,
            task_weighting: TaskWeighting::Renormalized,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(invalid(format!("model.{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(invalid("head_dim must be even for rotary encoding"));
        }
        if self.top_k > self.n_experts {
            return Err(invalid(format!(
                "top_k {} exceeds n_experts {}",
                self.top_k, self.n_experts
            )));
        }
        if !(self.rms_eps > 0.0) || !(self.rope_base > 1.0) {
            return Err(invalid("rms_eps must be > 0 and rope_base > 1"));
        }
        Ok(())
    }

    /// Total trainable parameter count.
    pub fn n_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * d * d + d * self.n_experts + self.n_experts * 3 * d * self.d_ff;
        self.vocab_size * d + self.n_layers * per_layer + d
    }
}
