//! Toy recognizer: frozen featurizer, trainable projector, pre-LN transformer
//! backbone and two composable low-rank adapters.

mod config;
pub mod featurizer;
mod infer;
mod lora;
mod policy;

pub use config::{AdapterTarget, FeaturizerConfig, ModelConfig, SpecialTokens};
pub use featurizer::SymbolKind;
pub use infer::{Engine, EngineScorer, GraphScorer, StepScorer};
pub use lora::{effective_weight, lora_delta, AdapterRole, LoraAdapter};
pub use policy::{AudioInput, ParamGroup, PolicyModel, PromptInputs};

use crate::autodiff::AutodiffError;

/// Segment ids used by the segment embedding.
pub const SEG_PROMPT: usize = 0;
pub const SEG_CONTEXT: usize = 1;
pub const SEG_AUDIO: usize = 2;
pub const SEG_TARGET: usize = 3;
pub const NUM_SEGMENTS: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("unknown observation symbol {symbol}")]
    UnknownSymbol { symbol: u32 },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("target sequence must end with the end-of-sequence token")]
    MissingEos,
    #[error("model has no {0} adapter")]
    MissingAdapter(&'static str),
    #[error("gamma must be finite and non-negative, got {0}")]
    InvalidGamma(f64),
}
