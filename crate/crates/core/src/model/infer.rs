//! Decoding-time forward passes.
//!
//! [`Engine`] runs on merged weights with a key/value cache: the prefix is
//! encoded once and each beam carries only its own target rows.
//! [`GraphScorer`] recomputes the full graph forward at every step; it is
//! slow but scores exactly like [`PolicyModel::sequence_log_prob`].

use super::lora::{effective_weight, lora_delta};
use super::policy::target_index;
use super::{AdapterTarget, AudioInput, ModelError, PolicyModel, PromptInputs, SEG_AUDIO, SEG_CONTEXT, SEG_PROMPT, SEG_TARGET};
use crate::autodiff::{kernels, ParamStore, Tensor};

/// Incremental next-token scorer driven by beam search.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// State before any target token has been emitted.
    fn initial(&self) -> Result<Self::State, ModelError>;

    /// Log-probabilities of the next token.
    fn log_probs<'s>(&self, state: &'s Self::State) -> &'s [f64];

    /// State after appending `token`.
    fn advance(&self, state: &Self::State, token: u32) -> Result<Self::State, ModelError>;
}

const TARGETS: [AdapterTarget; 4] = [
    AdapterTarget::Query,
    AdapterTarget::Key,
    AdapterTarget::Value,
    AdapterTarget::Output,
];

/// Frozen model with adapters merged into the attention weights at a fixed
/// `γ`. Runs in 64-bit.
pub struct Engine<'m> {
    model: &'m PolicyModel,
    params: ParamStore<f64>,
    merged: Vec<[Tensor<f64>; 4]>,
}

/// Per-layer keys and values of the encoded prefix.
#[derive(Clone, Debug)]
pub struct PrefixCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
    hidden: Vec<f64>,
    log_probs: Vec<f64>,
}

/// Per-beam keys and values of emitted target tokens.
#[derive(Clone, Debug)]
pub struct TargetCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
    hidden: Vec<f64>,
    log_probs: Vec<f64>,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m PolicyModel, gamma: f64) -> Result<Self, ModelError> {
        let cfg = model.config();
        let params: ParamStore<f64> = model.params().cast();
        let mut merged = Vec::with_capacity(cfg.num_layers);
        for (li, ids) in model.layout.layers.iter().enumerate() {
            let mut ws = Vec::with_capacity(4);
            for t in TARGETS {
                let base = params.get(ids.w[target_index(t)]);
                let delta = |adapter: Option<&super::LoraAdapter>| -> Result<Option<Tensor<f64>>, ModelError> {
                    match adapter.and_then(|a| a.get(li, t)) {
                        Some((b, a)) => Ok(Some(lora_delta(params.get(b), params.get(a))?)),
                        None => Ok(None),
                    }
                };
                let sft = delta(Some(model.sft_adapter()))?;
                let refine = if gamma != 0.0 { delta(model.refine_adapter())? } else { None };
                ws.push(effective_weight(base, sft.as_ref(), refine.as_ref(), cfg.lora_alpha, cfg.lora_rank, gamma)?);
            }
            merged.push(ws.try_into().expect("four targets"));
        }
        Ok(Self { model, params, merged })
    }

    pub fn model(&self) -> &PolicyModel {
        self.model
    }

    fn add_embeddings(&self, x: &mut [f64], pos: usize, seg: usize) {
        let p = &self.params;
        let lay = &self.model.layout;
        let pr = p.get(lay.pos_emb).row(pos);
        for (xi, pi) in x.iter_mut().zip(pr) {
            *xi += *pi;
        }
        let sr = p.get(lay.seg_emb).row(seg);
        for (xi, si) in x.iter_mut().zip(sr) {
            *xi += *si;
        }
    }

    fn token_row(&self, token: u32, pos: usize, seg: usize) -> Vec<f64> {
        let mut x = self.params.get(self.model.layout.tok_emb).row(token as usize).to_vec();
        self.add_embeddings(&mut x, pos, seg);
        x
    }

    /// Runs the layer stack on `n` new rows. Each new row attends to every
    /// cached row plus the new rows up to `visible(i)`. Returns the final
    /// residual stream and appends the new keys/values to `k`/`v`.
    fn run_layers(
        &self,
        mut x: Vec<f64>,
        n: usize,
        past: &[(&[f64], &[f64])],
        new_k: &mut [Vec<f64>],
        new_v: &mut [Vec<f64>],
        bidirectional: bool,
    ) -> Vec<f64> {
        let cfg = self.model.config();
        let p = &self.params;
        let d = cfg.model_dim;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut h = vec![0.0f64; n * d];
        for (li, ids) in self.model.layout.layers.iter().enumerate() {
            let w = &self.merged[li];
            for (xr, hr) in x.chunks(d).zip(h.chunks_mut(d)) {
                kernels::layer_norm_row(xr, p.get(ids.ln1.0).data(), p.get(ids.ln1.1).data(), hr);
            }
            let mut q = vec![0.0f64; n * d];
            let mut k = vec![0.0f64; n * d];
            let mut v = vec![0.0f64; n * d];
            kernels::matmul_nn(&h, w[0].data(), n, d, d, &mut q);
            kernels::matmul_nn(&h, w[1].data(), n, d, d, &mut k);
            kernels::matmul_nn(&h, w[2].data(), n, d, d, &mut v);
            let (pk, pv) = past.get(li).copied().unwrap_or((&[], &[]));
            let np = pk.len() / d;
            let mut cat = vec![0.0f64; n * d];
            let mut scores = vec![0.0f64; np + n];
            for i in 0..n {
                let visible = np + if bidirectional { n } else { i + 1 };
                for head in 0..cfg.num_heads {
                    let off = head * hd;
                    let qi = &q[i * d + off..i * d + off + hd];
                    for (j, s) in scores.iter_mut().enumerate().take(visible) {
                        let kj = if j < np {
                            &pk[j * d + off..j * d + off + hd]
                        } else {
                            &k[(j - np) * d + off..(j - np) * d + off + hd]
                        };
                        *s = kernels::dot(qi, kj) * scale;
                    }
                    kernels::softmax_row(&mut scores[..visible], visible);
                    let out = &mut cat[i * d + off..i * d + off + hd];
                    out.fill(0.0);
                    for (j, &a) in scores.iter().enumerate().take(visible) {
                        if a == 0.0 {
                            continue;
                        }
                        let vj = if j < np {
                            &pv[j * d + off..j * d + off + hd]
                        } else {
                            &v[(j - np) * d + off..(j - np) * d + off + hd]
                        };
                        for (o, vv) in out.iter_mut().zip(vj) {
                            *o += a * vv;
                        }
                    }
                }
            }
            new_k[li].extend_from_slice(&k);
            new_v[li].extend_from_slice(&v);
            let mut o = vec![0.0f64; n * d];
            kernels::matmul_nn(&cat, w[3].data(), n, d, d, &mut o);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            for (xr, hr) in x.chunks(d).zip(h.chunks_mut(d)) {
                kernels::layer_norm_row(xr, p.get(ids.ln2.0).data(), p.get(ids.ln2.1).data(), hr);
            }
            let f = cfg.ffn_dim;
            let mut u = vec![0.0f64; n * f];
            kernels::matmul_nn(&h, p.get(ids.w1).data(), n, d, f, &mut u);
            let b1 = p.get(ids.b1).data();
            for row in u.chunks_mut(f) {
                for (ui, bi) in row.iter_mut().zip(b1) {
                    *ui = kernels::gelu(*ui + bi);
                }
            }
            let mut o = vec![0.0f64; n * d];
            kernels::matmul_nn(&u, p.get(ids.w2).data(), n, f, d, &mut o);
            let b2 = p.get(ids.b2).data();
            for (xr, or) in x.chunks_mut(d).zip(o.chunks(d)) {
                for ((xi, oi), bi) in xr.iter_mut().zip(or).zip(b2) {
                    *xi += oi + bi;
                }
            }
        }
        x
    }

    fn logits_from_hidden(&self, row: &[f64]) -> Vec<f64> {
        let cfg = self.model.config();
        let p = &self.params;
        let lay = &self.model.layout;
        let mut h = vec![0.0f64; cfg.model_dim];
        kernels::layer_norm_row(row, p.get(lay.ln_f.0).data(), p.get(lay.ln_f.1).data(), &mut h);
        let v = cfg.vocab_size;
        let mut logits = vec![0.0f64; v];
        kernels::matmul_nn(&h, p.get(lay.head_w).data(), 1, cfg.model_dim, v, &mut logits);
        for (l, b) in logits.iter_mut().zip(p.get(lay.head_b).data()) {
            *l += b;
        }
        logits
    }

    /// Encodes everything up to and including `target_sep`. Any target
    /// prefix in `inputs` is ignored.
    pub fn encode_prefix(&self, inputs: &PromptInputs) -> Result<PrefixCache, ModelError> {
        let model = self.model;
        model.validate_inputs(inputs, &[])?;
        let cfg = model.config();
        let p = &self.params;
        let lay = &model.layout;
        let d = cfg.model_dim;
        let n = inputs.prefix_len();
        let mut x = Vec::with_capacity(n * d);
        for (i, &t) in inputs.prompt.iter().enumerate() {
            x.extend(self.token_row(t, i, SEG_PROMPT));
        }
        for (i, &t) in inputs.context.iter().enumerate() {
            x.extend(self.token_row(t, i, SEG_CONTEXT));
        }
        x.extend(self.token_row(cfg.special.audio_sep, 0, SEG_AUDIO));
        match &inputs.audio {
            AudioInput::Features(f) => {
                let k = f.rows();
                let fd = cfg.feature_dim;
                let mut hid = vec![0.0f64; k * d];
                let f: Tensor<f64> = f.cast();
                kernels::matmul_nn(f.data(), p.get(lay.proj[0]).data(), k, fd, d, &mut hid);
                let b1 = p.get(lay.proj[1]).data();
                for row in hid.chunks_mut(d) {
                    for (hi, bi) in row.iter_mut().zip(b1) {
                        *hi = kernels::gelu(*hi + bi);
                    }
                }
                let mut out = vec![0.0f64; k * d];
                kernels::matmul_nn(&hid, p.get(lay.proj[2]).data(), k, d, d, &mut out);
                let b2 = p.get(lay.proj[3]).data();
                for (i, row) in out.chunks_mut(d).enumerate() {
                    for (oi, bi) in row.iter_mut().zip(b2) {
                        *oi += bi;
                    }
                    self.add_embeddings(row, i + 1, SEG_AUDIO);
                }
                x.extend(out);
            }
            AudioInput::TextProxy(pairs) => {
                let emb = p.get(lay.tok_emb);
                for (i, &(a, b)) in pairs.iter().enumerate() {
                    let mut row: Vec<f64> = emb
                        .row(a as usize)
                        .iter()
                        .zip(emb.row(b as usize))
                        .map(|(ea, eb)| (ea + eb) * 0.5)
                        .collect();
                    self.add_embeddings(&mut row, i + 1, SEG_AUDIO);
                    x.extend(row);
                }
            }
        }
        x.extend(self.token_row(cfg.special.target_sep, 1, SEG_TARGET));
        let mut k = vec![Vec::new(); cfg.num_layers];
        let mut v = vec![Vec::new(); cfg.num_layers];
        let out = self.run_layers(x, n, &[], &mut k, &mut v, true);
        let hidden = out[(n - 1) * d..].to_vec();
        let log_probs = kernels::log_softmax(&self.logits_from_hidden(&hidden));
        Ok(PrefixCache {
            k,
            v,
            len: n,
            hidden,
            log_probs,
        })
    }

    pub fn empty_target(&self, prefix: &PrefixCache) -> TargetCache {
        let layers = self.model.config().num_layers;
        TargetCache {
            k: vec![Vec::new(); layers],
            v: vec![Vec::new(); layers],
            len: 0,
            hidden: prefix.hidden.clone(),
            log_probs: prefix.log_probs.clone(),
        }
    }

    /// Appends `token` to a beam and returns the extended cache.
    pub fn step(&self, prefix: &PrefixCache, cache: &TargetCache, token: u32) -> Result<TargetCache, ModelError> {
        let cfg = self.model.config();
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfVocab {
                token,
                vocab: cfg.vocab_size,
            });
        }
        let len = prefix.len + cache.len + 1;
        if len > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len,
                max: cfg.max_seq_len,
            });
        }
        let x = self.token_row(token, cache.len + 2, SEG_TARGET);
        let past_k: Vec<Vec<f64>> = (0..cfg.num_layers)
            .map(|l| [prefix.k[l].as_slice(), cache.k[l].as_slice()].concat())
            .collect();
        let past_v: Vec<Vec<f64>> = (0..cfg.num_layers)
            .map(|l| [prefix.v[l].as_slice(), cache.v[l].as_slice()].concat())
            .collect();
        let past: Vec<(&[f64], &[f64])> = past_k.iter().zip(&past_v).map(|(k, v)| (k.as_slice(), v.as_slice())).collect();
        let mut next = cache.clone();
        let out = self.run_layers(x, 1, &past, &mut next.k, &mut next.v, false);
        next.len += 1;
        next.log_probs = kernels::log_softmax(&self.logits_from_hidden(&out));
        next.hidden = out;
        Ok(next)
    }

    /// Next-token logits for every target row, recomputed incrementally.
    pub fn logits(&self, inputs: &PromptInputs) -> Result<Tensor<f32>, ModelError> {
        let prefix = self.encode_prefix(inputs)?;
        let v = self.model.config().vocab_size;
        let mut cache = self.empty_target(&prefix);
        let mut rows = vec![self.logits_from_hidden(&cache.hidden)];
        for &t in &inputs.target_prefix {
            cache = self.step(&prefix, &cache, t)?;
            rows.push(self.logits_from_hidden(&cache.hidden));
        }
        let data = rows.concat().into_iter().map(|x| x as f32).collect();
        Ok(Tensor::new(vec![rows.len(), v], data)?)
    }

    /// Beam-search scorer over one prompt.
    pub fn scorer(&self, inputs: &PromptInputs) -> Result<EngineScorer<'_, 'm>, ModelError> {
        Ok(EngineScorer {
            prefix: self.encode_prefix(inputs)?,
            engine: self,
        })
    }
}

pub struct EngineScorer<'e, 'm> {
    engine: &'e Engine<'m>,
    prefix: PrefixCache,
}

impl StepScorer for EngineScorer<'_, '_> {
    type State = TargetCache;

    fn vocab_size(&self) -> usize {
        self.engine.model.config().vocab_size
    }

    fn initial(&self) -> Result<TargetCache, ModelError> {
        Ok(self.engine.empty_target(&self.prefix))
    }

    fn log_probs<'s>(&self, state: &'s TargetCache) -> &'s [f64] {
        &state.log_probs
    }

    fn advance(&self, state: &TargetCache, token: u32) -> Result<TargetCache, ModelError> {
        self.engine.step(&self.prefix, state, token)
    }
}

/// Full-graph scorer: identical arithmetic to `sequence_log_prob`.
pub struct GraphScorer<'m> {
    model: &'m PolicyModel,
    inputs: PromptInputs,
}

impl<'m> GraphScorer<'m> {
    pub fn new(model: &'m PolicyModel, inputs: &PromptInputs) -> Self {
        Self {
            model,
            inputs: inputs.with_target_prefix(&[]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphState {
    tokens: Vec<u32>,
    log_probs: Vec<f64>,
}

impl GraphScorer<'_> {
    fn state(&self, tokens: Vec<u32>) -> Result<GraphState, ModelError> {
        let logits = self.model.forward_logits(&self.inputs.with_target_prefix(&tokens))?;
        let log_probs = kernels::log_softmax(logits.row(tokens.len()));
        Ok(GraphState { tokens, log_probs })
    }
}

impl StepScorer for GraphScorer<'_> {
    type State = GraphState;

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn initial(&self) -> Result<GraphState, ModelError> {
        self.state(Vec::new())
    }

    fn log_probs<'s>(&self, state: &'s GraphState) -> &'s [f64] {
        &state.log_probs
    }

    fn advance(&self, state: &GraphState, token: u32) -> Result<GraphState, ModelError> {
        let mut tokens = state.tokens.clone();
        tokens.push(token);
        self.state(tokens)
    }
}
