//! Synthetic session corpus.
//!
//! Each session activates a few confusable pairs and fixes one member of
//! each. Topic tokens sometimes emit their pair's shared ambiguous symbol,
//! so only the session history tells the members apart. A simulated
//! teacher recognizer flips ambiguously observed topic tokens.

mod corpus;
mod vocab;

pub use corpus::{generate_corpus, generate_session, ChannelConfig, Corpus, CorpusConfig, Session, SplitSizes, Utterance};
pub use vocab::{Vocab, AUDIO_SEP, CTX_SEP, EOS, NUM_RESERVED, PAD, PROMPT, TARGET_SEP};

use rand::Rng;

use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("teacher epsilon {0} outside [0, 1]")]
    InvalidEpsilon(f64),
    #[error("utterance {session_id}/{t}: {msg}")]
    Malformed { session_id: String, t: usize, msg: String },
}

/// Simulated teacher transcript: the reference with each ambiguously
/// observed topic token replaced by its partner with probability `epsilon`.
pub fn teacher_decode(vocab: &Vocab, utt: &Utterance, epsilon: f64, seed: u64) -> Result<Vec<u32>, DataError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(DataError::InvalidEpsilon(epsilon));
    }
    if utt.obs.len() != utt.reference.len() {
        return Err(DataError::Malformed {
            session_id: utt.session_id.clone(),
            t: utt.t,
            msg: "observation and reference lengths differ".into(),
        });
    }
    let mut r = rng::stream(seed, &format!("teacher/{}", utt.session_id), utt.t as u64);
    Ok(utt
        .reference
        .iter()
        .zip(&utt.obs)
        .map(|(&tok, &sym)| {
            if vocab.ambiguous_pair(sym).is_some() && r.gen_bool(epsilon) {
                vocab.partner(tok).unwrap_or(tok)
            } else {
                tok
            }
        })
        .collect())
}

/// Channel and topic invariants of a session.
pub fn check_session(vocab: &Vocab, session: &Session) -> Result<(), DataError> {
    let fail = |t: usize, msg: String| DataError::Malformed {
        session_id: session.id.clone(),
        t,
        msg,
    };
    if session.utterances.len() < 2 {
        return Err(fail(0, "session has fewer than two utterances".into()));
    }
    for (i, u) in session.utterances.iter().enumerate() {
        if u.t != i + 1 || u.session_id != session.id {
            return Err(fail(u.t, "utterance out of order".into()));
        }
        if u.obs.len() != u.reference.len() || u.noise.len() != u.obs.len() {
            return Err(fail(u.t, "observation, noise and reference lengths differ".into()));
        }
        for (&tok, &sym) in u.reference.iter().zip(&u.obs) {
            if vocab.is_reserved(tok) || tok as usize >= vocab.size() {
                return Err(fail(u.t, format!("token {tok} not a transcript token")));
            }
            if let Some((pair, _)) = vocab.pair_of(tok) {
                if !session.topic.contains(&(pair, tok)) {
                    return Err(fail(u.t, format!("topic token {tok} not in session assignment")));
                }
                if sym != vocab.symbol_of(tok) && vocab.ambiguous_pair(sym) != Some(pair) {
                    return Err(fail(u.t, format!("symbol {sym} cannot emit token {tok}")));
                }
            } else if sym != vocab.symbol_of(tok) {
                return Err(fail(u.t, format!("symbol {sym} cannot emit token {tok}")));
            }
        }
    }
    Ok(())
}
