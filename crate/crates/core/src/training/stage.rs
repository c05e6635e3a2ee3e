use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::losses::{dpo_objective, reference_log_ratio, sft_objective, DpoExample, TrainExample};
use super::{apply_context_dropout, PreferencePair, TrainError};
use crate::autodiff::{Adam, AdamConfig, Gradients, Graph};
use crate::data::{Session, Utterance, Vocab};
use crate::decoding::{build_context, utterance_inputs, with_eos, ContextWindow, HistorySource};
use crate::model::{AdapterRole, AudioInput, ParamGroup, PolicyModel, PromptInputs};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Backbone language-model pretraining on text-proxy audio.
    #[serde(rename = "0")]
    Backbone,
    /// Projector alignment, context-free.
    #[serde(rename = "1")]
    Projector,
    /// Projector plus SFT adapter.
    #[serde(rename = "2")]
    Sft,
    #[serde(rename = "3-dpo")]
    Dpo,
    #[serde(rename = "3-sft2")]
    Sft2,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Backbone => "0",
            Stage::Projector => "1",
            Stage::Sft => "2",
            Stage::Dpo => "3-dpo",
            Stage::Sft2 => "3-sft2",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        [Stage::Backbone, Stage::Projector, Stage::Sft, Stage::Dpo, Stage::Sft2]
            .into_iter()
            .find(|st| st.tag() == s)
    }

    /// Stage the initial checkpoint must come from.
    pub fn requires(self) -> Option<Stage> {
        match self {
            Stage::Backbone => None,
            Stage::Projector => Some(Stage::Backbone),
            Stage::Sft => Some(Stage::Projector),
            Stage::Dpo | Stage::Sft2 => Some(Stage::Sft),
        }
    }

    pub fn trainable(self) -> &'static [ParamGroup] {
        match self {
            Stage::Backbone => &[ParamGroup::Backbone],
            Stage::Projector => &[ParamGroup::Projector],
            Stage::Sft => &[ParamGroup::Projector, ParamGroup::Sft],
            Stage::Dpo | Stage::Sft2 => &[ParamGroup::Refine],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// History used to build training contexts (oracle or teacher).
    pub history_source: HistorySource,
    pub p_drop: f64,
    pub n: usize,
    /// Examples per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub accumulation: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub beta: f64,
    pub max_steps: u64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let base = TrainConfig {
            stage,
            history_source: HistorySource::Teacher,
            p_drop: 0.5,
            n: 2,
            batch_size: 16,
            accumulation: 1,
            learning_rate: 1e-3,
            warmup_steps: 100,
            beta: 0.1,
            max_steps: 1000,
            seed: 0,
        };
        match stage {
            Stage::Backbone => TrainConfig {
                history_source: HistorySource::Oracle,
                p_drop: 0.3,
                learning_rate: 3e-3,
                ..base
            },
            Stage::Projector => TrainConfig {
                n: 0,
                p_drop: 0.0,
                learning_rate: 1e-2,
                warmup_steps: 50,
                max_steps: 400,
                ..base
            },
            Stage::Sft => TrainConfig {
                learning_rate: 3e-3,
                max_steps: 800,
                ..base
            },
            Stage::Dpo | Stage::Sft2 => TrainConfig {
                p_drop: 0.0,
                batch_size: 2,
                accumulation: 16,
                learning_rate: 1e-3,
                warmup_steps: 0,
                max_steps: 150,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.p_drop) {
            return bad(format!("p_drop {} outside [0, 1]", self.p_drop));
        }
        if self.batch_size == 0 || self.accumulation == 0 {
            return bad("batch_size and accumulation must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("invalid learning rate {}", self.learning_rate));
        }
        if self.stage == Stage::Dpo && !(self.beta > 0.0) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !matches!(self.history_source, HistorySource::Oracle | HistorySource::Teacher) {
            return bad(format!("history_source must be oracle or teacher, got {}", self.history_source));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: PolicyModel,
    pub log: Vec<TrainLogRecord>,
}

fn history(utterances: &[Utterance], source: HistorySource) -> Result<Vec<Vec<u32>>, TrainError> {
    utterances
        .iter()
        .map(|u| match source {
            HistorySource::Teacher => u.teacher_hyp.clone().ok_or_else(|| {
                TrainError::Decode(crate::decoding::DecodeError::MissingTeacher {
                    session_id: u.session_id.clone(),
                    t: u.t,
                })
            }),
            _ => Ok(u.reference.clone()),
        })
        .collect()
}

fn example_for(
    config: &TrainConfig,
    model: &PolicyModel,
    vocab: &Vocab,
    session: &Session,
    ui: usize,
    r: &mut impl Rng,
) -> Result<TrainExample, TrainError> {
    let utt = &session.utterances[ui];
    let window = if config.stage == Stage::Projector {
        ContextWindow::empty(0)
    } else {
        let h = history(&session.utterances[..ui], config.history_source)?;
        build_context(&h, config.n, config.history_source)
    };
    let window = apply_context_dropout(window, config.p_drop, r);
    let inputs = if config.stage == Stage::Backbone {
        PromptInputs {
            prompt: vec![crate::data::PROMPT],
            context: window.render(),
            audio: AudioInput::TextProxy(
                utt.obs
                    .iter()
                    .zip(&utt.reference)
                    .map(|(&s, &t)| vocab.text_proxy(s, t))
                    .collect(),
            ),
            target_prefix: Vec::new(),
        }
    } else {
        utterance_inputs(model, utt, &window)?
    };
    Ok(TrainExample {
        inputs,
        target: with_eos(&utt.reference),
    })
}

/// Deterministic micro-batch `micro` of optimizer step `step` for the
/// supervised stages 0–2.
pub fn stage_batch(
    config: &TrainConfig,
    model: &PolicyModel,
    vocab: &Vocab,
    sessions: &[Session],
    step: u64,
    micro: usize,
) -> Result<Vec<TrainExample>, TrainError> {
    let index: Vec<(usize, usize)> = sessions
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.utterances.len()).map(move |ui| (si, ui)))
        .collect();
    if index.is_empty() {
        return Err(TrainError::NoData(config.stage));
    }
    let mut r = rng::stream(
        rng::derive(config.seed, &format!("batch/{}", config.stage), step),
        "micro",
        micro as u64,
    );
    (0..config.batch_size)
        .map(|_| {
            let (si, ui) = index[r.gen_range(0..index.len())];
            example_for(config, model, vocab, &sessions[si], ui, &mut r)
        })
        .collect()
}

fn check_stage(config: &TrainConfig, init_stage: Option<Stage>) -> Result<(), TrainError> {
    if init_stage != config.stage.requires() {
        let show = |s: Option<Stage>| s.map_or("none".to_string(), |s| s.tag().to_string());
        return Err(TrainError::StageMismatch {
            stage: config.stage,
            expected: show(config.stage.requires()),
            found: show(init_stage),
        });
    }
    Ok(())
}

/// Runs one training stage.
///
/// `init_stage` is the stage that produced `model` (`None` for a fresh
/// model). Stages 3-dpo and 3-sft2 attach a fresh refine adapter and train
/// on `pairs`, whose inputs are looked up in `sessions`.
pub fn train_stage(
    config: &TrainConfig,
    mut model: PolicyModel,
    init_stage: Option<Stage>,
    vocab: &Vocab,
    sessions: &[Session],
    pairs: &[PreferencePair],
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_stage(config, init_stage)?;
    let trainable = config.stage.trainable();
    let mut opt = Adam::new(config.adam());
    let mut log = Vec::with_capacity(config.max_steps as usize);

    let pair_examples = match config.stage {
        Stage::Dpo | Stage::Sft2 => {
            if model.refine_adapter().is_some() {
                return Err(TrainError::InvalidConfig("initial checkpoint already has a refine adapter".into()));
            }
            if pairs.is_empty() {
                return Err(TrainError::NoData(config.stage));
            }
            let role = if config.stage == Stage::Dpo { AdapterRole::Dpo } else { AdapterRole::Sft2 };
            model.attach_refine_adapter(role, config.seed)?;
            model.set_gamma(0.0)?;
            let lookup: HashMap<(&str, usize), &Utterance> = sessions
                .iter()
                .flat_map(|s| s.utterances.iter().map(|u| ((u.session_id.as_str(), u.t), u)))
                .collect();
            let mut out = Vec::with_capacity(pairs.len());
            for p in pairs {
                let utt = lookup
                    .get(&(p.session_id.as_str(), p.t))
                    .ok_or_else(|| TrainError::UnknownUtterance {
                        session_id: p.session_id.clone(),
                        t: p.t,
                    })?;
                let window = ContextWindow {
                    n: config.n,
                    entries: p.context.clone(),
                    source: config.history_source,
                };
                let inputs = utterance_inputs(&model, utt, &window)?;
                let chosen = with_eos(&p.chosen);
                let rejected = with_eos(&p.rejected);
                let ref_ratio = if config.stage == Stage::Dpo {
                    reference_log_ratio(&model, &inputs, &chosen, &rejected, 0.0)?
                } else {
                    0.0
                };
                out.push(DpoExample {
                    inputs,
                    chosen,
                    rejected,
                    ref_ratio,
                });
            }
            out
        }
        _ => Vec::new(),
    };

    for step in 0..config.max_steps {
        let mut grads = Gradients::new();
        let mut loss = 0.0;
        for micro in 0..config.accumulation {
            let params = model.params();
            let mut g = Graph::new();
            let node = match config.stage {
                Stage::Dpo | Stage::Sft2 => {
                    let mut r = rng::stream(
                        rng::derive(config.seed, &format!("pairs/{}", config.stage), step),
                        "micro",
                        micro as u64,
                    );
                    let batch: Vec<&DpoExample> = (0..config.batch_size)
                        .map(|_| &pair_examples[r.gen_range(0..pair_examples.len())])
                        .collect();
                    if config.stage == Stage::Dpo {
                        let mut total = None;
                        for ex in batch {
                            let l = dpo_objective(&model, &mut g, params, ex, config.beta, trainable)?;
                            total = Some(match total {
                                Some(t) => g.add(t, l)?,
                                None => l,
                            });
                        }
                        total.expect("non-empty micro-batch")
                    } else {
                        let examples: Vec<TrainExample> = batch
                            .into_iter()
                            .map(|ex| TrainExample {
                                inputs: ex.inputs.clone(),
                                target: ex.chosen.clone(),
                            })
                            .collect();
                        sft_objective(&model, &mut g, params, &examples, 1.0, trainable)?
                    }
                }
                _ => {
                    let batch = stage_batch(config, &model, vocab, sessions, step, micro)?;
                    sft_objective(&model, &mut g, params, &batch, 0.0, trainable)?
                }
            };
            let value = g.value(node).item() as f64;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, value });
            }
            loss += value;
            grads.accumulate(&g.backward(node)?)?;
        }
        opt.update(model.params_mut(), &grads)?;
        log::debug!("stage {} step {} loss {:.6}", config.stage, step, loss);
        log.push(TrainLogRecord { step, loss });
    }
    if matches!(config.stage, Stage::Dpo | Stage::Sft2) {
        model.set_gamma(1.0)?;
    }
    Ok(TrainOutcome { model, log })
}
