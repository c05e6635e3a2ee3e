use serde::{Deserialize, Serialize};

use super::{corpus_wer, wer, WerResult};
use crate::data::{Session, Vocab};
use crate::decoding::{attack_context, decode_session, decode_with_contexts, DecodeConfig, DecodeError, DecodedUtterance, HistorySource};
use crate::model::{Engine, PolicyModel};
use crate::training::{filter_pairs, train_stage, PreferencePair, Stage, TrainConfig, TrainError};

/// Decoding settings shared by every condition of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub decode: DecodeConfig,
    /// Seed of the attack-context draws.
    pub seed: u64,
}

/// Corpus WER of one `(corpus, N, source, γ)` condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: String,
    pub corpus: String,
    pub n: usize,
    pub source: HistorySource,
    pub gamma: f64,
    pub wer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
    /// Attack gap, on attack rows only.
    pub gap: Option<f64>,
    pub seed: u64,
}

/// Clean (predicted history) versus attacked WER.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackGap {
    pub condition: String,
    pub corpus: String,
    pub n: usize,
    pub gamma: f64,
    #[serde(rename = "Attacks/o")]
    pub attacks_o: f64,
    #[serde(rename = "Attacks/w")]
    pub attacks_w: f64,
    #[serde(rename = "Gap")]
    pub gap: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub conditions: Vec<ConditionResult>,
    pub gaps: Vec<AttackGap>,
}

fn condition_name(corpus: &str, n: usize, source: &str, gamma: f64) -> String {
    format!("{corpus}/n={n}/{source}/gamma={gamma}")
}

impl EvalReport {
    pub fn merge(&mut self, other: EvalReport) {
        self.conditions.extend(other.conditions);
        self.gaps.extend(other.gaps);
    }

    pub fn get(&self, corpus: &str, n: usize, source: HistorySource, gamma: f64) -> Option<&ConditionResult> {
        self.conditions
            .iter()
            .find(|c| c.corpus == corpus && c.n == n && c.source == source && c.gamma == gamma)
    }

    pub fn wer(&self, corpus: &str, n: usize, source: HistorySource, gamma: f64) -> Option<f64> {
        self.get(corpus, n, source, gamma).map(|c| c.wer)
    }

    pub fn gap(&self, corpus: &str, n: usize, gamma: f64) -> Option<&AttackGap> {
        self.gaps
            .iter()
            .find(|g| g.corpus == corpus && g.n == n && g.gamma == gamma)
    }

    /// Plain mean of the per-corpus WER over `corpora` for one condition.
    pub fn average(&self, corpora: &[&str], n: usize, source: HistorySource, gamma: f64) -> Option<f64> {
        if corpora.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for c in corpora {
            sum += self.wer(c, n, source, gamma)?;
        }
        Some(sum / corpora.len() as f64)
    }

    /// One JSON object per condition. Attack rows also carry the
    /// `Attacks/o`, `Attacks/w` and `Gap` columns.
    pub fn records(&self) -> Vec<serde_json::Value> {
        self.conditions
            .iter()
            .map(|c| {
                let mut v = serde_json::to_value(c).expect("serializable");
                if c.source == HistorySource::Attack {
                    if let (Some(g), Some(obj)) = (self.gap(&c.corpus, c.n, c.gamma), v.as_object_mut()) {
                        obj.insert("Attacks/o".into(), g.attacks_o.into());
                        obj.insert("Attacks/w".into(), g.attacks_w.into());
                        obj.insert("Gap".into(), g.gap.into());
                    }
                }
                v
            })
            .collect()
    }
}

/// Decodes every session of `sessions` under one history source. Attack
/// windows are drawn from the other sessions of `sessions`.
pub fn decode_condition(
    engine: &Engine,
    sessions: &[Session],
    n: usize,
    source: HistorySource,
    settings: &EvalSettings,
) -> Result<Vec<DecodedUtterance>, DecodeError> {
    let mut out = Vec::new();
    for s in sessions {
        let decoded = if source == HistorySource::Attack {
            let windows = attack_context(s, sessions, n, settings.seed)?;
            decode_with_contexts(engine, s, &windows, &settings.decode)?
        } else {
            decode_session(engine, s, n, source, &settings.decode)?
        };
        out.extend(decoded);
    }
    Ok(out)
}

fn score(sessions: &[Session], decoded: &[DecodedUtterance]) -> WerResult {
    let refs = sessions.iter().flat_map(|s| s.utterances.iter().map(|u| &u.reference));
    let results: Vec<WerResult> = refs.zip(decoded).map(|(r, d)| wer(r, &d.hypothesis)).collect();
    corpus_wer(&results)
}

/// Evaluation of `model` at composition `gamma`, returning the decodes of
/// each condition alongside the report.
pub fn evaluate_detailed(
    model: &PolicyModel,
    corpus: &str,
    sessions: &[Session],
    n: usize,
    sources: &[HistorySource],
    gamma: f64,
    settings: &EvalSettings,
) -> Result<(EvalReport, Vec<Vec<DecodedUtterance>>), DecodeError> {
    let engine = Engine::new(model, gamma)?;
    let mut report = EvalReport::default();
    let mut decodes = Vec::with_capacity(sources.len());
    for &source in sources {
        let decoded = decode_condition(&engine, sessions, n, source, settings)?;
        let r = score(sessions, &decoded);
        report.conditions.push(ConditionResult {
            condition: condition_name(corpus, n, source.tag(), gamma),
            corpus: corpus.to_string(),
            n,
            source,
            gamma,
            wer: r.wer,
            substitutions: r.substitutions,
            insertions: r.insertions,
            deletions: r.deletions,
            ref_len: r.ref_len,
            gap: None,
            seed: settings.seed,
        });
        decodes.push(decoded);
    }
    let clean = report.wer(corpus, n, HistorySource::Predicted, gamma);
    let attacked = report.wer(corpus, n, HistorySource::Attack, gamma);
    if let (Some(o), Some(w)) = (clean, attacked) {
        for c in &mut report.conditions {
            if c.source == HistorySource::Attack {
                c.gap = Some(w - o);
            }
        }
        report.gaps.push(AttackGap {
            condition: condition_name(corpus, n, "gap", gamma),
            corpus: corpus.to_string(),
            n,
            gamma,
            attacks_o: o,
            attacks_w: w,
            gap: w - o,
            seed: settings.seed,
        });
    }
    Ok((report, decodes))
}

pub fn evaluate(
    model: &PolicyModel,
    corpus: &str,
    sessions: &[Session],
    n: usize,
    sources: &[HistorySource],
    gamma: f64,
    settings: &EvalSettings,
) -> Result<EvalReport, DecodeError> {
    Ok(evaluate_detailed(model, corpus, sessions, n, sources, gamma, settings)?.0)
}

pub const DEFAULT_GAMMA_GRID: [f64; 8] = [0.0, 0.0625, 0.125, 0.1875, 0.25, 0.375, 0.5, 0.625];
pub const DEFAULT_THRESHOLDS: [f64; 6] = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0];

/// One evaluation per grid value, with identical settings throughout.
pub fn sweep_gamma(
    model: &PolicyModel,
    corpus: &str,
    sessions: &[Session],
    grid: &[f64],
    n: usize,
    sources: &[HistorySource],
    settings: &EvalSettings,
) -> Result<Vec<EvalReport>, DecodeError> {
    grid.iter()
        .map(|&g| evaluate(model, corpus, sessions, n, sources, g, settings))
        .collect()
}

/// Grid of a threshold ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub thresholds: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub n: usize,
    pub sources: Vec<HistorySource>,
    /// Preference-stage config reused for every threshold.
    pub dpo: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRun {
    pub threshold: f64,
    pub pairs: usize,
    /// One report per grid value; empty when no pair survived.
    pub reports: Vec<EvalReport>,
}

/// For each threshold, filters `candidates`, trains a preference adapter
/// on top of `stage2` and sweeps `γ` on `eval_sessions`.
///
/// `known` holds sweeps already computed with the same settings, keyed by
/// pair set; a threshold whose pairs match one is not retrained.
#[allow(clippy::too_many_arguments)]
pub fn sweep_threshold(
    stage2: &PolicyModel,
    candidates: &[PreferencePair],
    sweep: &ThresholdSweep,
    vocab: &Vocab,
    train_sessions: &[Session],
    corpus: &str,
    eval_sessions: &[Session],
    settings: &EvalSettings,
    known: Vec<(Vec<PreferencePair>, Vec<EvalReport>)>,
) -> Result<Vec<ThresholdRun>, TrainError> {
    let mut out = Vec::with_capacity(sweep.thresholds.len());
    let mut cache = known;
    for &threshold in &sweep.thresholds {
        let pairs = filter_pairs(candidates, threshold);
        // Training is deterministic, so an identical pair set gives identical reports.
        let reports = if pairs.is_empty() {
            Vec::new()
        } else if let Some((_, reports)) = cache.iter().find(|(p, _)| *p == pairs) {
            reports.clone()
        } else {
            let trained = train_stage(&sweep.dpo, stage2.clone(), Some(Stage::Sft), vocab, train_sessions, &pairs)?;
            sweep_gamma(&trained.model, corpus, eval_sessions, &sweep.gamma_grid, sweep.n, &sweep.sources, settings)?
        };
        out.push(ThresholdRun {
            threshold,
            pairs: pairs.len(),
            reports: reports.clone(),
        });
        cache.push((pairs, reports));
    }
    Ok(out)
}
