use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::featurizer::{self, SymbolKind};
use super::lora::{AdapterRole, LoraAdapter};
use super::{AdapterTarget, ModelConfig, ModelError, NUM_SEGMENTS, SEG_AUDIO, SEG_CONTEXT, SEG_PROMPT, SEG_TARGET};
use crate::autodiff::{kernels, AttentionMask, Graph, NodeId, ParamId, ParamStore, Scalar, Tensor};
use crate::rng;

/// Which training stage may touch a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Backbone,
    Projector,
    Sft,
    Refine,
}

/// The acoustic segment.
#[derive(Clone, Debug, PartialEq)]
pub enum AudioInput {
    /// Featurizer output, `[K, feature_dim]`; passed through the projector.
    Features(Tensor<f32>),
    /// Backbone pretraining stand-in: row `k` is the mean of the token
    /// embeddings of `(a, b)`; `a == b` for an unambiguous position.
    TextProxy(Vec<(u32, u32)>),
}

impl AudioInput {
    pub fn len(&self) -> usize {
        match self {
            AudioInput::Features(f) => f.rows(),
            AudioInput::TextProxy(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Model input: `[prompt][context][audio_sep][audio][target_sep][target prefix]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptInputs {
    pub prompt: Vec<u32>,
    /// Rendered context window.
    pub context: Vec<u32>,
    pub audio: AudioInput,
    pub target_prefix: Vec<u32>,
}

impl PromptInputs {
    /// Rows visible bidirectionally, up to and including `target_sep`.
    pub fn prefix_len(&self) -> usize {
        self.prompt.len() + self.context.len() + self.audio.len() + 2
    }

    pub fn total_len(&self) -> usize {
        self.prefix_len() + self.target_prefix.len()
    }

    pub fn with_target_prefix(&self, prefix: &[u32]) -> PromptInputs {
        PromptInputs {
            target_prefix: prefix.to_vec(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub ln1: (ParamId, ParamId),
    pub w: [ParamId; 4],
    pub ln2: (ParamId, ParamId),
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub table: ParamId,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub seg_emb: ParamId,
    pub proj: [ParamId; 4],
    pub layers: Vec<LayerIds>,
    pub ln_f: (ParamId, ParamId),
    pub head_w: ParamId,
    pub head_b: ParamId,
}

pub(crate) fn target_index(t: AdapterTarget) -> usize {
    match t {
        AdapterTarget::Query => 0,
        AdapterTarget::Key => 1,
        AdapterTarget::Value => 2,
        AdapterTarget::Output => 3,
    }
}

/// Backbone, projector, SFT adapter and an optional refine adapter whose
/// contribution is scaled by `γ`.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    config: ModelConfig,
    params: ParamStore<f32>,
    groups: Vec<ParamGroup>,
    pub(crate) layout: Layout,
    sft: LoraAdapter,
    refine: Option<LoraAdapter>,
    gamma: f64,
}

struct Init<'a> {
    params: &'a mut ParamStore<f32>,
    groups: &'a mut Vec<ParamGroup>,
    seed: u64,
}

impl Init<'_> {
    fn add(&mut self, name: String, group: ParamGroup, shape: &[usize], std: f64) -> ParamId {
        let index = self.params.len() as u64;
        let mut r = rng::stream(self.seed, "init", index);
        let n: usize = shape.iter().product();
        let data = if std == 0.0 {
            vec![0.0; n]
        } else {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| normal.sample(&mut r) as f32).collect()
        };
        self.groups.push(group);
        self.params.add(name, Tensor::new(shape.to_vec(), data).expect("init shape"))
    }

    fn ones(&mut self, name: String, group: ParamGroup, n: usize) -> ParamId {
        self.groups.push(group);
        self.params.add(name, Tensor::filled(&[n], 1.0))
    }

    fn lora(&mut self, cfg: &ModelConfig, role: AdapterRole, group: ParamGroup) -> LoraAdapter {
        let d = cfg.model_dim;
        let r = cfg.lora_rank;
        let mut factors = BTreeMap::new();
        for layer in 0..cfg.num_layers {
            for &t in &cfg.adapter_targets {
                let prefix = format!("lora.{}.{layer}.{}", role.tag(), t.tag());
                let b = self.add(format!("{prefix}.b"), group, &[d, r], 0.0);
                let a = self.add(format!("{prefix}.a"), group, &[r, d], 1.0 / (d as f64).sqrt());
                factors.insert((layer, t), (b, a));
            }
        }
        LoraAdapter { role, factors }
    }
}

impl PolicyModel {
    /// Fresh model with the featurizer table built for `kinds`.
    pub fn new(config: ModelConfig, kinds: &[SymbolKind]) -> Result<Self, ModelError> {
        config.validate()?;
        let table = featurizer::build_table(kinds, config.feature_dim, &config.featurizer);
        Self::with_table(config, table)
    }

    fn with_table(config: ModelConfig, table: Tensor<f32>) -> Result<Self, ModelError> {
        config.validate()?;
        if table.shape().len() != 2 || table.cols() != config.feature_dim {
            return Err(ModelError::InvalidConfig(format!(
                "featurizer table shape {:?} does not match feature_dim {}",
                table.shape(),
                config.feature_dim
            )));
        }
        let mut params = ParamStore::new();
        let mut groups = Vec::new();
        let (d, f, v, fd) = (config.model_dim, config.ffn_dim, config.vocab_size, config.feature_dim);
        let mut init = Init {
            params: &mut params,
            groups: &mut groups,
            seed: config.init_seed,
        };
        init.groups.push(ParamGroup::Encoder);
        let table = init.params.add("encoder.table", table);
        let tok_emb = init.add("tok_emb".into(), ParamGroup::Backbone, &[v, d], 0.5);
        let pos_emb = init.add("pos_emb".into(), ParamGroup::Backbone, &[config.max_seq_len, d], 0.5);
        let seg_emb = init.add("seg_emb".into(), ParamGroup::Backbone, &[NUM_SEGMENTS, d], 0.5);
        let proj = [
            init.add("proj.w1".into(), ParamGroup::Projector, &[fd, d], 1.0 / (fd as f64).sqrt()),
            init.add("proj.b1".into(), ParamGroup::Projector, &[d], 0.0),
            init.add("proj.w2".into(), ParamGroup::Projector, &[d, d], 1.0 / (d as f64).sqrt()),
            init.add("proj.b2".into(), ParamGroup::Projector, &[d], 0.0),
        ];
        let resid = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let sd = 1.0 / (d as f64).sqrt();
            let ln1 = (init.ones(p("ln1.g"), ParamGroup::Backbone, d), init.add(p("ln1.b"), ParamGroup::Backbone, &[d], 0.0));
            let w = [
                init.add(p("attn.wq"), ParamGroup::Backbone, &[d, d], sd),
                init.add(p("attn.wk"), ParamGroup::Backbone, &[d, d], sd),
                init.add(p("attn.wv"), ParamGroup::Backbone, &[d, d], sd),
                init.add(p("attn.wo"), ParamGroup::Backbone, &[d, d], sd * resid),
            ];
            let ln2 = (init.ones(p("ln2.g"), ParamGroup::Backbone, d), init.add(p("ln2.b"), ParamGroup::Backbone, &[d], 0.0));
            layers.push(LayerIds {
                ln1,
                w,
                ln2,
                w1: init.add(p("ffn.w1"), ParamGroup::Backbone, &[d, f], sd),
                b1: init.add(p("ffn.b1"), ParamGroup::Backbone, &[f], 0.0),
                w2: init.add(p("ffn.w2"), ParamGroup::Backbone, &[f, d], resid / (f as f64).sqrt()),
                b2: init.add(p("ffn.b2"), ParamGroup::Backbone, &[d], 0.0),
            });
        }
        let ln_f = (init.ones("ln_f.g".into(), ParamGroup::Backbone, d), init.add("ln_f.b".into(), ParamGroup::Backbone, &[d], 0.0));
        let head_w = init.add("head.w".into(), ParamGroup::Backbone, &[d, v], 1.0 / (d as f64).sqrt());
        let head_b = init.add("head.b".into(), ParamGroup::Backbone, &[v], 0.0);
        let sft = init.lora(&config, AdapterRole::Sft, ParamGroup::Sft);
        Ok(Self {
            layout: Layout {
                table,
                tok_emb,
                pos_emb,
                seg_emb,
                proj,
                layers,
                ln_f,
                head_w,
                head_b,
            },
            config,
            params,
            groups,
            sft,
            refine: None,
            gamma: 0.0,
        })
    }

    /// Rebuild a model from named tensors, as stored in a checkpoint.
    pub fn from_named(
        config: ModelConfig,
        tensors: &[(String, Tensor<f32>)],
        refine_role: Option<AdapterRole>,
        gamma: f64,
    ) -> Result<Self, ModelError> {
        let table = tensors
            .iter()
            .find(|(n, _)| n == "encoder.table")
            .map(|(_, t)| t.clone())
            .ok_or_else(|| ModelError::InvalidInput("missing tensor encoder.table".into()))?;
        let mut model = Self::with_table(config, table)?;
        if let Some(role) = refine_role {
            model.attach_refine_adapter(role, 0)?;
        }
        if tensors.len() != model.params.len() {
            return Err(ModelError::InvalidInput(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = model
                .params
                .find(name)
                .ok_or_else(|| ModelError::InvalidInput(format!("unexpected tensor {name}")))?;
            if model.params.get(id).shape() != t.shape() {
                return Err(ModelError::InvalidInput(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = t.clone();
        }
        model.set_gamma(gamma)?;
        Ok(model)
    }

    /// Add a fresh zero-delta refine adapter (`B = 0`, random `A`).
    pub fn attach_refine_adapter(&mut self, role: AdapterRole, seed: u64) -> Result<(), ModelError> {
        if self.refine.is_some() {
            return Err(ModelError::InvalidInput("refine adapter already attached".into()));
        }
        if role == AdapterRole::Sft {
            return Err(ModelError::InvalidInput("refine adapter cannot take the sft role".into()));
        }
        let config = self.config.clone();
        let mut init = Init {
            params: &mut self.params,
            groups: &mut self.groups,
            seed: rng::derive(config.init_seed, "refine", seed),
        };
        self.refine = Some(init.lora(&config, role, ParamGroup::Refine));
        Ok(())
    }

    /// Drop the refine adapter, restoring the SFT-only model.
    pub fn detach_refine_adapter(&mut self) {
        if let Some(adapter) = self.refine.take() {
            let first = adapter.factors.values().map(|(b, _)| b.0).min().unwrap_or(0) as usize;
            let named: Vec<(String, Tensor<f32>)> = self
                .params
                .iter()
                .take(first)
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect();
            let mut params = ParamStore::new();
            for (n, t) in named {
                params.add(n, t);
            }
            self.params = params;
            self.groups.truncate(first);
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0 as usize]
    }

    pub fn group_params(&self, group: ParamGroup) -> Vec<ParamId> {
        (0..self.params.len() as u32)
            .map(ParamId)
            .filter(|id| self.group(*id) == group)
            .collect()
    }

    pub fn sft_adapter(&self) -> &LoraAdapter {
        &self.sft
    }

    pub fn refine_adapter(&self) -> Option<&LoraAdapter> {
        self.refine.as_ref()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<(), ModelError> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(ModelError::InvalidGamma(gamma));
        }
        self.gamma = gamma;
        Ok(())
    }

    pub fn table(&self) -> &Tensor<f32> {
        self.params.get(self.layout.table)
    }

    pub fn featurize(&self, symbols: &[u32], noise: &[Vec<f32>]) -> Result<Tensor<f32>, ModelError> {
        featurizer::featurize(self.table(), symbols, noise)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        let vocab = self.config.vocab_size;
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&token) => Err(ModelError::TokenOutOfVocab { token, vocab }),
            None => Ok(()),
        }
    }

    pub(crate) fn validate_inputs(&self, inputs: &PromptInputs, target_prefix: &[u32]) -> Result<(), ModelError> {
        self.check_tokens(&inputs.prompt)?;
        self.check_tokens(&inputs.context)?;
        self.check_tokens(target_prefix)?;
        match &inputs.audio {
            AudioInput::Features(f) => {
                if f.shape().len() != 2 || f.cols() != self.config.feature_dim {
                    return Err(ModelError::InvalidInput(format!(
                        "features of shape {:?}, expected [_, {}]",
                        f.shape(),
                        self.config.feature_dim
                    )));
                }
            }
            AudioInput::TextProxy(p) => {
                for &(a, b) in p {
                    self.check_tokens(&[a, b])?;
                }
            }
        }
        let len = inputs.prefix_len() + target_prefix.len();
        if len > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `g` and returns the logits node for the
    /// target rows: row 0 predicts the first target token, row `j` the
    /// token after `target_prefix[j-1]`.
    ///
    /// `params` must be this model's store, possibly cast to another
    /// scalar type. Parameters in `trainable` groups receive gradients.
    pub fn build_logits<'p, T: Scalar>(
        &self,
        g: &mut Graph<'p, T>,
        params: &'p ParamStore<T>,
        inputs: &PromptInputs,
        target_prefix: &[u32],
        gamma: f64,
        trainable: &[ParamGroup],
    ) -> Result<NodeId, ModelError> {
        self.validate_inputs(inputs, target_prefix)?;
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(ModelError::InvalidGamma(gamma));
        }
        let cfg = &self.config;
        let lay = &self.layout;
        let p = |g: &mut Graph<'p, T>, id: ParamId| g.param(params.get(id), id, trainable.contains(&self.group(id)));
        let (tok_emb, pos_emb, seg_emb) = (p(g, lay.tok_emb), p(g, lay.pos_emb), p(g, lay.seg_emb));
        let embed = |g: &mut Graph<'p, T>, toks: &[usize], pos: &[usize], seg: &[usize]| -> Result<NodeId, ModelError> {
            let t = g.embedding(tok_emb, toks)?;
            let po = g.embedding(pos_emb, pos)?;
            let s = g.embedding(seg_emb, seg)?;
            let ts = g.add(t, po)?;
            Ok(g.add(ts, s)?)
        };

        let np = inputs.prompt.len();
        let nc = inputs.context.len();
        let mut toks: Vec<usize> = inputs.prompt.iter().chain(&inputs.context).map(|&t| t as usize).collect();
        toks.push(cfg.special.audio_sep as usize);
        let pos: Vec<usize> = (0..np).chain(0..nc).chain([0]).collect();
        let seg: Vec<usize> = std::iter::repeat_n(SEG_PROMPT, np)
            .chain(std::iter::repeat_n(SEG_CONTEXT, nc))
            .chain([SEG_AUDIO])
            .collect();
        let head = embed(g, &toks, &pos, &seg)?;

        let k = inputs.audio.len();
        let apos: Vec<usize> = (1..=k).collect();
        let aseg = vec![SEG_AUDIO; k];
        let audio = if k == 0 {
            None
        } else {
            let base = match &inputs.audio {
                AudioInput::Features(f) => {
                    let x = g.input(f.cast());
                    let [w1, b1, w2, b2] = lay.proj.map(|id| p(g, id));
                    let h = g.matmul(x, w1)?;
                    let h = g.add_row(h, b1)?;
                    let h = g.gelu(h);
                    let h = g.matmul(h, w2)?;
                    g.add_row(h, b2)?
                }
                AudioInput::TextProxy(pairs) => {
                    let a: Vec<usize> = pairs.iter().map(|&(a, _)| a as usize).collect();
                    let b: Vec<usize> = pairs.iter().map(|&(_, b)| b as usize).collect();
                    let ea = g.embedding(tok_emb, &a)?;
                    let eb = g.embedding(tok_emb, &b)?;
                    let s = g.add(ea, eb)?;
                    g.scale(s, 0.5)
                }
            };
            let po = g.embedding(pos_emb, &apos)?;
            let s = g.embedding(seg_emb, &aseg)?;
            let x = g.add(base, po)?;
            Some(g.add(x, s)?)
        };

        let mut ttoks = vec![cfg.special.target_sep as usize];
        ttoks.extend(target_prefix.iter().map(|&t| t as usize));
        let tpos: Vec<usize> = (1..=ttoks.len()).collect();
        let tseg = vec![SEG_TARGET; ttoks.len()];
        let tail = embed(g, &ttoks, &tpos, &tseg)?;

        let mut parts = vec![head];
        parts.extend(audio);
        parts.push(tail);
        let mut x = g.concat_rows(&parts)?;
        let prefix = inputs.prefix_len();
        let mask = AttentionMask::PrefixCausal { prefix };
        let hd = cfg.head_dim();
        let attn_scale = 1.0 / (hd as f64).sqrt();
        let lora_scale = cfg.lora_scale();

        for (li, ids) in lay.layers.iter().enumerate() {
            let (g1, b1) = (p(g, ids.ln1.0), p(g, ids.ln1.1));
            let h = g.layer_norm(x, g1, b1)?;
            let proj = |g: &mut Graph<'p, T>, input: NodeId, t: AdapterTarget| -> Result<NodeId, ModelError> {
                let w = p(g, ids.w[target_index(t)]);
                let mut y = g.matmul(input, w)?;
                let mut adapters = vec![(&self.sft, lora_scale)];
                if gamma != 0.0 {
                    if let Some(r) = &self.refine {
                        adapters.push((r, gamma * lora_scale));
                    }
                }
                for (adapter, s) in adapters {
                    if let Some((bid, aid)) = adapter.get(li, t) {
                        let (bn, an) = (p(g, bid), p(g, aid));
                        let xb = g.matmul(input, bn)?;
                        let d = g.matmul(xb, an)?;
                        let d = g.scale(d, s);
                        y = g.add(y, d)?;
                    }
                }
                Ok(y)
            };
            let q = proj(g, h, AdapterTarget::Query)?;
            let kk = proj(g, h, AdapterTarget::Key)?;
            let v = proj(g, h, AdapterTarget::Value)?;
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for hi in 0..cfg.num_heads {
                let qh = g.slice_cols(q, hi * hd, hd)?;
                let kh = g.slice_cols(kk, hi * hd, hd)?;
                let vh = g.slice_cols(v, hi * hd, hd)?;
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, attn_scale);
                let a = g.masked_softmax(s, mask)?;
                heads.push(g.matmul(a, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let o = proj(g, cat, AdapterTarget::Output)?;
            x = g.add(x, o)?;
            let (g2, b2) = (p(g, ids.ln2.0), p(g, ids.ln2.1));
            let h = g.layer_norm(x, g2, b2)?;
            let (w1, fb1, w2, fb2) = (p(g, ids.w1), p(g, ids.b1), p(g, ids.w2), p(g, ids.b2));
            let f = g.matmul(h, w1)?;
            let f = g.add_row(f, fb1)?;
            let f = g.gelu(f);
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, fb2)?;
            x = g.add(x, f)?;
        }
        let rows = g.slice_rows(x, prefix - 1, 1 + target_prefix.len())?;
        let (gf, bf) = (p(g, lay.ln_f.0), p(g, lay.ln_f.1));
        let h = g.layer_norm(rows, gf, bf)?;
        let (hw, hb) = (p(g, lay.head_w), p(g, lay.head_b));
        let logits = g.matmul(h, hw)?;
        Ok(g.add_row(logits, hb)?)
    }

    /// `−log π(Y | inputs)` as a graph node, with teacher forcing on `y`.
    pub fn build_nll<'p, T: Scalar>(
        &self,
        g: &mut Graph<'p, T>,
        params: &'p ParamStore<T>,
        inputs: &PromptInputs,
        y: &[u32],
        gamma: f64,
        trainable: &[ParamGroup],
    ) -> Result<NodeId, ModelError> {
        self.check_target(y)?;
        let logits = self.build_logits(g, params, inputs, &y[..y.len() - 1], gamma, trainable)?;
        let targets: Vec<usize> = y.iter().map(|&t| t as usize).collect();
        Ok(g.cross_entropy(logits, &targets)?)
    }

    pub(crate) fn check_target(&self, y: &[u32]) -> Result<(), ModelError> {
        self.check_tokens(y)?;
        if y.last() != Some(&self.config.special.eos) {
            return Err(ModelError::MissingEos);
        }
        Ok(())
    }

    /// Next-token logits for each target row at the model's current `γ`,
    /// evaluated in 64-bit and rounded once.
    pub fn forward_logits(&self, inputs: &PromptInputs) -> Result<Tensor<f32>, ModelError> {
        let params: ParamStore<f64> = self.params.cast();
        let mut g = Graph::new();
        let id = self.build_logits(&mut g, &params, inputs, &inputs.target_prefix, self.gamma, &[])?;
        Ok(g.value(id).cast())
    }

    /// `log π(Y | inputs)`, summed over tokens. `y` must end with EOS.
    pub fn sequence_log_prob(&self, inputs: &PromptInputs, y: &[u32]) -> Result<f64, ModelError> {
        self.check_target(y)?;
        let logits = self.forward_logits(&inputs.with_target_prefix(&y[..y.len() - 1]))?;
        Ok(y
            .iter()
            .enumerate()
            .map(|(i, &t)| kernels::log_softmax(logits.row(i))[t as usize])
            .sum())
    }
}
