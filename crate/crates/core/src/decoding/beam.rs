use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::model::{ModelError, StepScorer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Maximum number of generated tokens, counting the end token.
    pub max_len: usize,
    pub length_norm: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            max_len: 16,
            length_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Transcript tokens, without the end token.
    pub tokens: Vec<u32>,
    /// Total log-probability, including the end token when present.
    pub score: f64,
    /// Set when generation stopped at `max_len` without an end token.
    pub truncated: bool,
}

impl Hypothesis {
    /// Token-id sequence used for tie-breaking: transcript plus end token.
    pub fn full_sequence(&self, eos: u32) -> Vec<u32> {
        let mut s = self.tokens.clone();
        if !self.truncated {
            s.push(eos);
        }
        s
    }
}

fn rank_key(score: f64, len: usize, length_norm: bool) -> f64 {
    if length_norm {
        score / len.max(1) as f64
    } else {
        score
    }
}

/// Higher key first, then lexicographically smaller sequence.
pub(crate) fn better(ka: f64, sa: &[u32], kb: f64, sb: &[u32]) -> Ordering {
    kb.partial_cmp(&ka).unwrap_or(Ordering::Equal).then_with(|| sa.cmp(sb))
}

struct Live<S> {
    tokens: Vec<u32>,
    score: f64,
    state: S,
}

/// Deterministic beam search.
///
/// At every step the `beam` best extensions of all live hypotheses are
/// kept, end-token extensions included; those move to the finished set.
/// Extensions reaching `max_len` without an end token finish truncated.
pub fn beam_search<S: StepScorer>(scorer: &S, eos: u32, config: &DecodeConfig) -> Result<Hypothesis, ModelError> {
    if config.beam == 0 || config.max_len == 0 {
        return Err(ModelError::InvalidInput("beam and max_len must be at least 1".into()));
    }
    let vocab = scorer.vocab_size() as u32;
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        state: scorer.initial()?,
    }];
    let mut finished: Vec<(f64, Vec<u32>, Hypothesis)> = Vec::new();
    for step in 0..config.max_len {
        let mut cands: Vec<(f64, Vec<u32>, usize, u32, f64)> = Vec::with_capacity(live.len() * vocab as usize);
        for (bi, b) in live.iter().enumerate() {
            let lp = scorer.log_probs(&b.state);
            for v in 0..vocab {
                let score = b.score + lp[v as usize];
                let mut seq = b.tokens.clone();
                seq.push(v);
                let key = rank_key(score, seq.len(), config.length_norm);
                cands.push((key, seq, bi, v, score));
            }
        }
        cands.sort_by(|a, b| better(a.0, &a.1, b.0, &b.1));
        cands.truncate(config.beam);
        let last = step + 1 == config.max_len;
        let mut next = Vec::with_capacity(cands.len());
        for (key, seq, bi, v, score) in cands {
            if v == eos {
                let tokens = live[bi].tokens.clone();
                finished.push((
                    key,
                    seq,
                    Hypothesis {
                        tokens,
                        score,
                        truncated: false,
                    },
                ));
            } else if last {
                finished.push((
                    key,
                    seq.clone(),
                    Hypothesis {
                        tokens: seq,
                        score,
                        truncated: true,
                    },
                ));
            } else {
                let state = scorer.advance(&live[bi].state, v)?;
                next.push(Live { tokens: seq, score, state });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if !config.length_norm {
            let best_live = live.iter().map(|b| b.score).fold(f64::NEG_INFINITY, f64::max);
            let best_done = finished.iter().map(|f| f.2.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done > best_live {
                break;
            }
        }
    }
    finished.sort_by(|a, b| better(a.0, &a.1, b.0, &b.1));
    Ok(finished.swap_remove(0).2)
}
