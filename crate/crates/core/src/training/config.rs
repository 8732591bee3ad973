use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Where the draft head's training text comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// Target features over windows of the corpus.
    Fixed,
    /// Target features over text the target sampled from corpus prompts.
    SelfGenerated,
}

/// Draft-head training knobs. Defaults are the harmonized configuration:
/// three alignment steps and a Top-K loss with K = 10 at weight 1.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub align_steps: usize,
    pub top_k: usize,
    pub top_k_weight: f64,
    pub cls_weight: f64,
    pub reg_weight: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub data_mode: DataMode,
    pub seed: u64,
    /// Cut gradients between forwards (features and keys/values).
    pub detach_between_forwards: bool,
    /// Also update the (private copy of the) embedding table.
    pub train_embedding: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            align_steps: 3,
            top_k: 10,
            top_k_weight: 1.0,
            cls_weight: 0.1,
            reg_weight: 1.0,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            grad_clip: 0.5,
            warmup_steps: 50,
            batch_size: 8,
            epochs: 2,
            data_mode: DataMode::Fixed,
            seed: 0,
            detach_between_forwards: true,
            train_embedding: false,
        }
    }
}

impl TrainConfig {
    /// The EAGLE-style control: one step and no Top-K term.
    pub fn baseline() -> Self {
        Self { align_steps: 1, top_k_weight: 0.0, ..Self::default() }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.align_steps == 0 {
            bail!(Config, "align_steps must be at least 1");
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            bail!(Parameter, "top_k {} must lie in 1..={}", self.top_k, vocab_size);
        }
        for (name, w) in [
            ("top_k_weight", self.top_k_weight),
            ("cls_weight", self.cls_weight),
            ("reg_weight", self.reg_weight),
            ("weight_decay", self.weight_decay),
        ] {
            if !(w >= 0.0) {
                bail!(Config, "{name} must be non-negative, got {w}");
            }
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            bail!(Config, "learning_rate and batch_size must be positive");
        }
        Ok(())
    }
}
