use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::Session;
use crate::decoding::{decode_session, DecodeConfig, HistorySource};
use crate::metrics::wer;
use crate::model::Engine;

/// `(X, Y⁺, Y⁻)` with the context used when `Y⁻` was decoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub session_id: String,
    pub t: usize,
    pub context: Vec<Vec<u32>>,
    /// Reference transcript, without the end token.
    pub chosen: Vec<u32>,
    /// Decoded hypothesis, without the end token.
    pub rejected: Vec<u32>,
    /// Per-utterance WER of `rejected`, in percent.
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningResult {
    pub threshold: f64,
    pub source: HistorySource,
    pub pairs: Vec<PreferencePair>,
}

impl MiningResult {
    /// Mining found nothing; callers report this as a warning.
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Decodes every utterance once and records it as a candidate pair,
/// sorted by `(session_id, t)`.
pub fn decode_candidates(
    engine: &Engine,
    sessions: &[Session],
    n: usize,
    source: HistorySource,
    config: &DecodeConfig,
) -> Result<Vec<PreferencePair>, TrainError> {
    let mut order: Vec<&Session> = sessions.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = Vec::new();
    for s in order {
        for (d, utt) in decode_session(engine, s, n, source, config)?.into_iter().zip(&s.utterances) {
            out.push(PreferencePair {
                session_id: d.session_id,
                t: d.t,
                context: d.context,
                wer: wer(&utt.reference, &d.hypothesis).wer,
                chosen: utt.reference.clone(),
                rejected: d.hypothesis,
            });
        }
    }
    Ok(out)
}

/// Candidates whose WER strictly exceeds `threshold` and whose hypothesis
/// differs from the reference.
pub fn filter_pairs(candidates: &[PreferencePair], threshold: f64) -> Vec<PreferencePair> {
    candidates
        .iter()
        .filter(|c| c.wer > threshold && c.chosen != c.rejected)
        .cloned()
        .collect()
}

pub fn mine_hard_negatives(
    engine: &Engine,
    sessions: &[Session],
    n: usize,
    threshold: f64,
    source: HistorySource,
    config: &DecodeConfig,
) -> Result<MiningResult, TrainError> {
    if !(threshold >= 0.0) {
        return Err(TrainError::InvalidConfig(format!("threshold must be non-negative, got {threshold}")));
    }
    let candidates = decode_candidates(engine, sessions, n, source, config)?;
    Ok(MiningResult {
        threshold,
        source,
        pairs: filter_pairs(&candidates, threshold),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(wer: f64, same: bool) -> PreferencePair {
        PreferencePair {
            session_id: "s".into(),
            t: 1,
            context: vec![],
            chosen: vec![1, 2],
            rejected: if same { vec![1, 2] } else { vec![1, 3] },
            wer,
        }
    }

    #[test]
    fn strict_threshold_and_identity_exclusion() {
        let c = vec![pair(25.0, false), pair(20.0, false), pair(0.0, true)];
        let kept = filter_pairs(&c, 20.0);
        assert_eq!(kept, vec![pair(25.0, false)]);
        assert!(filter_pairs(&[pair(0.0, true)], 0.0).is_empty());
    }
}
