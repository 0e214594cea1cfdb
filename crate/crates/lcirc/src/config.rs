//! Model and training configuration.
//!
//! One struct carries every architectural and training hyperparameter, is
//! embedded verbatim in checkpoints, and maps field-for-field onto the JSON
//! config files accepted by the CLI. Unknown JSON keys are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::fnv1a64;

/// How training-time segment lengths are drawn (never exceeding `seg_len_max`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegPolicy {
    /// Every segment has exactly `seg_len_max` tokens (last may be shorter).
    Fixed,
    /// Lengths drawn uniformly from `[seg_len_max/2, seg_len_max]`.
    UniformHalfToMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Byte-level vocabulary: 256 raw bytes plus BOS, EOS, PAD.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width inside each decoder layer.
    pub d_ff: usize,
    /// Hard positional window M of the base model.
    pub max_positions: usize,
    /// Compressor feature width.
    pub d_c: usize,
    /// Number of latent vectors per compressed block (K).
    pub k_slots: usize,
    /// Perceiver blocks per compression step.
    pub perceiver_blocks: usize,
    /// Inject gated cross-attention before every k-th decoder layer (1 = all).
    pub gca_every: usize,
    pub seg_policy: SegPolicy,
    /// Maximum training segment length R.
    pub seg_len_max: usize,
    /// Backpropagate through the last T compression steps.
    pub bptt_segments: usize,
    /// Extra early compression steps revisited by selective backprop.
    pub n_select: usize,
    pub layer_norm_eps: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 259,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_positions: 256,
            d_c: 128,
            k_slots: 16,
            perceiver_blocks: 2,
            gca_every: 1,
            seg_policy: SegPolicy::UniformHalfToMax,
            seg_len_max: 64,
            bptt_segments: 2,
            n_select: 8,
            layer_norm_eps: 1e-5,
            lr: 1e-3,
            warmup_steps: 30,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_positions < 8 {
            return Err(Error::Config(format!(
                "max_positions must be at least 8, got {}",
                self.max_positions
            )));
        }
        if self.k_slots == 0 {
            return Err(Error::Config("k_slots must be at least 1".into()));
        }
        if self.seg_len_max == 0 || self.seg_len_max > self.max_positions {
            return Err(Error::Config(format!(
                "seg_len_max {} must lie in 1..=max_positions ({})",
                self.seg_len_max, self.max_positions
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.gca_every == 0 {
            return Err(Error::Config("gca_every must be at least 1".into()));
        }
        if self.perceiver_blocks == 0 {
            return Err(Error::Config("perceiver_blocks must be at least 1".into()));
        }
        if self.bptt_segments == 0 {
            return Err(Error::Config("bptt_segments must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Number of decoder layers that receive an injection block.
    pub fn n_gca_blocks(&self) -> usize {
        (0..self.n_layers).filter(|l| l % self.gca_every == 0).count()
    }

    /// Stable hash of the serialized config, recorded in reports and
    /// compressed-state files.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a64(json.as_bytes())
    }
}
