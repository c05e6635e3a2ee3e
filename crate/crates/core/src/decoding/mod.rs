//! Sequential utterance decoding with pluggable history.

mod beam;

pub use beam::{beam_search, DecodeConfig, Hypothesis};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Session, Utterance, CTX_SEP, EOS, PROMPT};
use crate::model::{AudioInput, Engine, ModelError, PolicyModel, PromptInputs};
use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("utterance {session_id}/{t} has no teacher hypothesis")]
    MissingTeacher { session_id: String, t: usize },
    #[error("attack pool needs at least one session other than {0}")]
    PoolTooSmall(String),
    #[error("source {0} needs explicit context windows")]
    UnsupportedSource(HistorySource),
    #[error("expected {expected} context windows, got {got}")]
    WindowCount { expected: usize, got: usize },
}

/// Where history transcripts come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistorySource {
    Oracle,
    Predicted,
    Teacher,
    Attack,
    Empty,
}

impl HistorySource {
    pub fn tag(self) -> &'static str {
        match self {
            HistorySource::Oracle => "oracle",
            HistorySource::Predicted => "predicted",
            HistorySource::Teacher => "teacher",
            HistorySource::Attack => "attack",
            HistorySource::Empty => "empty",
        }
    }
}

impl std::fmt::Display for HistorySource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for HistorySource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oracle" => Ok(HistorySource::Oracle),
            "predicted" => Ok(HistorySource::Predicted),
            "teacher" => Ok(HistorySource::Teacher),
            "attack" => Ok(HistorySource::Attack),
            "empty" => Ok(HistorySource::Empty),
            _ => Err(format!("unknown history source {s:?}")),
        }
    }
}

/// The last `n` history transcripts, oldest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub n: usize,
    pub entries: Vec<Vec<u32>>,
    pub source: HistorySource,
}

impl ContextWindow {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
            source: HistorySource::Empty,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries joined by a single separator token.
    pub fn render(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                out.push(CTX_SEP);
            }
            out.extend_from_slice(e);
        }
        out
    }
}

/// Window over the `t − 1` transcripts preceding utterance `t`.
pub fn build_context(history: &[Vec<u32>], n: usize, source: HistorySource) -> ContextWindow {
    let k = n.min(history.len());
    let entries = history[history.len() - k..].to_vec();
    ContextWindow {
        n,
        source: if entries.is_empty() { HistorySource::Empty } else { source },
        entries,
    }
}

/// Model input for one utterance under `window`.
pub fn utterance_inputs(model: &PolicyModel, utt: &Utterance, window: &ContextWindow) -> Result<PromptInputs, ModelError> {
    Ok(PromptInputs {
        prompt: vec![PROMPT],
        context: window.render(),
        audio: AudioInput::Features(model.featurize(&utt.obs, &utt.noise)?),
        target_prefix: Vec::new(),
    })
}

/// Reference with the end token appended.
pub fn with_eos(tokens: &[u32]) -> Vec<u32> {
    let mut y = tokens.to_vec();
    y.push(EOS);
    y
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedUtterance {
    pub session_id: String,
    pub t: usize,
    pub source: HistorySource,
    pub context: Vec<Vec<u32>>,
    pub hypothesis: Vec<u32>,
    pub score: f64,
    pub truncated: bool,
}

pub fn decode_utterance(
    engine: &Engine,
    utt: &Utterance,
    window: &ContextWindow,
    config: &DecodeConfig,
) -> Result<Hypothesis, DecodeError> {
    let inputs = utterance_inputs(engine.model(), utt, window)?;
    let scorer = engine.scorer(&inputs)?;
    Ok(beam_search(&scorer, EOS, config)?)
}

/// Decodes `session` in order, building each context from `source`.
pub fn decode_session(
    engine: &Engine,
    session: &Session,
    n: usize,
    source: HistorySource,
    config: &DecodeConfig,
) -> Result<Vec<DecodedUtterance>, DecodeError> {
    let mut history: Vec<Vec<u32>> = Vec::with_capacity(session.utterances.len());
    let mut out = Vec::with_capacity(session.utterances.len());
    for utt in &session.utterances {
        let window = match source {
            HistorySource::Empty => ContextWindow::empty(n),
            HistorySource::Attack => return Err(DecodeError::UnsupportedSource(source)),
            _ => build_context(&history, n, source),
        };
        let hyp = decode_utterance(engine, utt, &window, config)?;
        history.push(match source {
            HistorySource::Oracle => utt.reference.clone(),
            HistorySource::Teacher => utt.teacher_hyp.clone().ok_or_else(|| DecodeError::MissingTeacher {
                session_id: utt.session_id.clone(),
                t: utt.t,
            })?,
            _ => hyp.tokens.clone(),
        });
        out.push(DecodedUtterance {
            session_id: session.id.clone(),
            t: utt.t,
            source: window.source,
            context: window.entries,
            hypothesis: hyp.tokens,
            score: hyp.score,
            truncated: hyp.truncated,
        });
    }
    Ok(out)
}

/// Decodes `session` with one precomputed window per utterance.
pub fn decode_with_contexts(
    engine: &Engine,
    session: &Session,
    windows: &[ContextWindow],
    config: &DecodeConfig,
) -> Result<Vec<DecodedUtterance>, DecodeError> {
    if windows.len() != session.utterances.len() {
        return Err(DecodeError::WindowCount {
            expected: session.utterances.len(),
            got: windows.len(),
        });
    }
    session
        .utterances
        .iter()
        .zip(windows)
        .map(|(utt, window)| {
            let hyp = decode_utterance(engine, utt, window, config)?;
            Ok(DecodedUtterance {
                session_id: session.id.clone(),
                t: utt.t,
                source: window.source,
                context: window.entries.clone(),
                hypothesis: hyp.tokens,
                score: hyp.score,
                truncated: hyp.truncated,
            })
        })
        .collect()
}

/// `(session, utterance)` draws behind [`attack_context`].
pub fn attack_draws<'a>(
    session: &Session,
    pool: &'a [Session],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<&'a Utterance>>, DecodeError> {
    let others: Vec<&Session> = pool.iter().filter(|s| s.id != session.id).collect();
    if others.is_empty() {
        return Err(DecodeError::PoolTooSmall(session.id.clone()));
    }
    Ok(session
        .utterances
        .iter()
        .map(|utt| {
            let mut r = rng::stream(seed, &format!("attack/{}", session.id), utt.t as u64);
            (0..n.min(utt.t - 1))
                .map(|_| {
                    let s = others[r.gen_range(0..others.len())];
                    &s.utterances[r.gen_range(0..s.utterances.len())]
                })
                .collect()
        })
        .collect())
}

/// Irrelevant-context windows for every utterance of `session`: each of
/// the `min(n, t − 1)` entries is a reference transcript drawn from a
/// uniformly chosen other session of `pool`, then a uniformly chosen
/// utterance within it.
pub fn attack_context(session: &Session, pool: &[Session], n: usize, seed: u64) -> Result<Vec<ContextWindow>, DecodeError> {
    Ok(attack_draws(session, pool, n, seed)?
        .into_iter()
        .map(|draws| ContextWindow {
            n,
            source: if draws.is_empty() { HistorySource::Empty } else { HistorySource::Attack },
            entries: draws.into_iter().map(|u| u.reference.clone()).collect(),
        })
        .collect())
}
