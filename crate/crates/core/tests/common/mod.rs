#![allow(dead_code)]

use ctxbias::autodiff::Tensor;
use ctxbias::data::{Vocab, AUDIO_SEP, EOS, PROMPT, TARGET_SEP};
use ctxbias::model::{AdapterRole, AdapterTarget, AudioInput, ModelConfig, PolicyModel, PromptInputs, SpecialTokens};
use rand::Rng;

pub fn tiny_vocab() -> Vocab {
    Vocab {
        num_pairs: 2,
        num_common: 3,
    }
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    let v = tiny_vocab();
    ModelConfig {
        model_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 32,
        max_seq_len: 48,
        lora_rank: 2,
        adapter_targets: vec![AdapterTarget::Query, AdapterTarget::Key, AdapterTarget::Value, AdapterTarget::Output],
        init_seed: seed,
        ..ModelConfig::new(
            v.size(),
            4,
            SpecialTokens {
                eos: EOS,
                audio_sep: AUDIO_SEP,
                target_sep: TARGET_SEP,
            },
        )
    }
}

pub fn tiny_model(seed: u64) -> PolicyModel {
    PolicyModel::new(tiny_config(seed), &tiny_vocab().symbol_kinds()).unwrap()
}

/// Overwrites every adapter factor whose name contains `role` with random
/// values, making the adapter's delta non-zero.
pub fn randomize_adapter(model: &mut PolicyModel, role: &str, seed: u64) {
    let mut r = ctxbias::rng::stream(seed, "randomize", 0);
    let prefix = format!("lora.{role}.");
    let ids: Vec<_> = model
        .params()
        .iter()
        .filter(|(_, n, _)| n.starts_with(&prefix))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        let t = model.params_mut().get_mut(id);
        let data: Vec<f32> = (0..t.len()).map(|_| r.gen_range(-0.3..0.3)).collect();
        *t = Tensor::new(t.shape().to_vec(), data).unwrap();
    }
}

/// Tiny model with random SFT and refine adapters.
pub fn adapted_model(seed: u64) -> PolicyModel {
    let mut m = tiny_model(seed);
    m.attach_refine_adapter(AdapterRole::Dpo, 0).unwrap();
    randomize_adapter(&mut m, "sft", seed);
    randomize_adapter(&mut m, "dpo", seed + 1);
    m
}

pub fn tiny_inputs(model: &PolicyModel, seed: u64) -> PromptInputs {
    let v = tiny_vocab();
    let mut r = ctxbias::rng::stream(seed, "inputs", 0);
    let k = r.gen_range(1..=4);
    let symbols: Vec<u32> = (0..k).map(|_| r.gen_range(0..(v.num_symbols() as u32))).collect();
    let noise: Vec<Vec<f32>> = (0..k).map(|_| (0..4).map(|_| r.gen_range(-0.5..0.5)).collect()).collect();
    let context: Vec<u32> = (0..r.gen_range(0..4)).map(|_| r.gen_range(6..v.size() as u32)).collect();
    PromptInputs {
        prompt: vec![PROMPT],
        context,
        audio: AudioInput::Features(model.featurize(&symbols, &noise).unwrap()),
        target_prefix: Vec::new(),
    }
}

pub fn tiny_corpus_config(sessions: usize) -> ctxbias::data::CorpusConfig {
    use ctxbias::data::{ChannelConfig, CorpusConfig, SplitSizes};
    CorpusConfig {
        vocab: tiny_vocab(),
        channel: ChannelConfig {
            min_len: 2,
            max_len: 4,
            ..ChannelConfig::default()
        },
        sizes: SplitSizes {
            train: sessions,
            dev: 2,
            test: sessions,
            ood: 2,
        },
        active_pairs: 1,
        min_session_len: 2,
        max_session_len: 4,
        feature_dim: 4,
        ..CorpusConfig::default()
    }
}

pub fn short_decode() -> ctxbias::decoding::DecodeConfig {
    ctxbias::decoding::DecodeConfig {
        beam: 2,
        max_len: 6,
        length_norm: false,
    }
}
