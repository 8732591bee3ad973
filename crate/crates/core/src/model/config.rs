use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Shape of the target transformer; the draft head reuses `d_model`,
/// `n_heads`, `d_ff` and the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rms_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 512, d_model: 256, n_layers: 6, n_heads: 8, d_ff: 1024, max_seq_len: 512, rms_norm_eps: 1e-5 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            bail!(Config, "vocab_size must be at least 2, got {}", self.vocab_size);
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            bail!(Config, "d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads);
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            bail!(Config, "head width {} must be even for rotary embeddings", self.d_model / self.n_heads);
        }
        if self.max_seq_len < 8 {
            bail!(Config, "max_seq_len must be at least 8, got {}", self.max_seq_len);
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            bail!(Config, "n_layers and d_ff must be positive");
        }
        if !(self.rms_norm_eps > 0.0) {
            bail!(Config, "rms_norm_eps must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_invalid_configs_are_rejected() {
        ModelConfig::default().validate().unwrap();
        let bad = [
            ModelConfig { d_model: 250, ..Default::default() },
            ModelConfig { vocab_size: 1, ..Default::default() },
            ModelConfig { max_seq_len: 4, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{"vocab_size":4,"d_model":8,"n_layers":1,"n_heads":2,"d_ff":8,"max_seq_len":16,"rms_norm_eps":1e-5,"extra":1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }
}
