use serde::{Deserialize, Serialize};

use super::ModelError;

/// Weight matrices of an attention block that can carry adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    Query,
    Key,
    Value,
    Output,
}

impl AdapterTarget {
    pub fn tag(self) -> &'static str {
        match self {
            AdapterTarget::Query => "q",
            AdapterTarget::Key => "k",
            AdapterTarget::Value => "v",
            AdapterTarget::Output => "o",
        }
    }
}

/// Reserved token ids the model must know about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub eos: u32,
    pub audio_sep: u32,
    pub target_sep: u32,
}

/// Construction of the frozen observation featurizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub seed: u64,
    /// Half-distance between the two members of a confusable pair, relative
    /// to the per-dimension scale of the pair centre.
    pub pair_separation: f64,
    /// Per-dimension scale of non-pair symbols.
    pub plain_scale: f64,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            seed: 0x00C0_FFEE,
            pair_separation: 0.8,
            plain_scale: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub feature_dim: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub adapter_targets: Vec<AdapterTarget>,
    pub special: SpecialTokens,
    pub featurizer: FeaturizerConfig,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.lora_rank == 0 {
            return bad("lora_rank must be at least 1".into());
        }
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.vocab_size == 0 || self.feature_dim == 0 || self.max_seq_len < 4 {
            return bad("vocab_size, feature_dim and max_seq_len must be positive".into());
        }
        for t in [self.special.eos, self.special.audio_sep, self.special.target_sep] {
            if t as usize >= self.vocab_size {
                return bad(format!("special token {t} outside vocabulary"));
            }
        }
        Ok(())
    }

    /// `α / r`, shared by both adapters.
    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

impl ModelConfig {
    /// Default architecture for a given vocabulary and feature width.
    pub fn new(vocab_size: usize, feature_dim: usize, special: SpecialTokens) -> Self {
        Self {
            vocab_size,
            model_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            feature_dim,
            max_seq_len: 128,
            lora_rank: 8,
            lora_alpha: 32.0,
            adapter_targets: vec![AdapterTarget::Query, AdapterTarget::Value],
            special,
            featurizer: FeaturizerConfig::default(),
            init_seed: 0,
        }
    }
}
