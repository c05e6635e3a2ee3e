use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Vocab};
use crate::rng;

/// Observation channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Chance that a topic token emits its pair's ambiguous symbol.
    pub ambiguity: f64,
    /// Standard deviation of the per-dimension feature noise.
    pub noise: f64,
    /// Probability that a transcript position holds a topic token.
    pub topic_density: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            ambiguity: 0.4,
            noise: 0.8,
            topic_density: 0.5,
            min_len: 3,
            max_len: 8,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return bad(format!("ambiguity {} outside [0, 1]", self.ambiguity));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        if !(0.0..=1.0).contains(&self.topic_density) {
            return bad(format!("topic_density {} outside [0, 1]", self.topic_density));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("invalid length range [{}, {}]", self.min_len, self.max_len));
        }
        Ok(())
    }

    /// The shifted channel used for the out-of-domain split.
    pub fn out_of_domain(&self) -> ChannelConfig {
        ChannelConfig {
            ambiguity: (self.ambiguity + 0.2).min(1.0),
            noise: self.noise * 1.5,
            min_len: self.min_len.max(6).min(self.max_len),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub ood: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 500,
            dev: 80,
            test: 100,
            ood: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab: Vocab,
    pub channel: ChannelConfig,
    /// Channel of the out-of-domain split; derived from `channel` if absent.
    pub ood_channel: Option<ChannelConfig>,
    pub sizes: SplitSizes,
    /// Confusable pairs active in one session.
    pub active_pairs: usize,
    pub min_session_len: usize,
    pub max_session_len: usize,
    pub feature_dim: usize,
    /// Teacher flip probability on ambiguously observed topic tokens.
    pub teacher_epsilon: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab: Vocab::default(),
            channel: ChannelConfig::default(),
            ood_channel: None,
            sizes: SplitSizes::default(),
            active_pairs: 3,
            min_session_len: 3,
            max_session_len: 8,
            feature_dim: 16,
            teacher_epsilon: 0.15,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        self.channel.validate()?;
        self.ood().validate()?;
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.active_pairs == 0 || self.active_pairs > self.vocab.num_pairs {
            return bad(format!(
                "active_pairs {} must be in [1, {}]",
                self.active_pairs, self.vocab.num_pairs
            ));
        }
        if self.vocab.num_common == 0 {
            return bad("vocabulary needs at least one common token".into());
        }
        if self.min_session_len < 2 || self.min_session_len > self.max_session_len {
            return bad(format!(
                "invalid session length range [{}, {}]",
                self.min_session_len, self.max_session_len
            ));
        }
        if !(0.0..=1.0).contains(&self.teacher_epsilon) {
            return bad(format!("teacher_epsilon {} outside [0, 1]", self.teacher_epsilon));
        }
        Ok(())
    }

    pub fn ood(&self) -> ChannelConfig {
        self.ood_channel.clone().unwrap_or_else(|| self.channel.out_of_domain())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub session_id: String,
    /// 1-based position within the session.
    pub t: usize,
    pub obs: Vec<u32>,
    /// Stored feature noise, one vector per observation.
    pub noise: Vec<Vec<f32>>,
    #[serde(rename = "ref")]
    pub reference: Vec<u32>,
    pub teacher_hyp: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    /// Active topic token per active pair, as `(pair, token)`.
    pub topic: Vec<(usize, u32)>,
    pub utterances: Vec<Utterance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Session>,
    pub dev: Vec<Session>,
    pub test: Vec<Session>,
    pub ood: Vec<Session>,
}

impl Corpus {
    pub fn splits(&self) -> [(&'static str, &[Session]); 4] {
        [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
            ("ood", &self.ood),
        ]
    }
}

/// Session with the given id, drawn from its own derived stream.
pub fn generate_session(
    cfg: &CorpusConfig,
    channel: &ChannelConfig,
    id: String,
    seed: u64,
) -> Session {
    let vocab = &cfg.vocab;
    let mut r = rng::stream(seed, &id, 0);
    let mut pairs: Vec<usize> = sample(&mut r, vocab.num_pairs, cfg.active_pairs).into_vec();
    pairs.sort_unstable();
    let topic: Vec<(usize, u32)> = pairs
        .iter()
        .map(|&p| {
            let (a, b) = vocab.pair_tokens(p);
            (p, if r.gen_bool(0.5) { b } else { a })
        })
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let len = r.gen_range(cfg.min_session_len..=cfg.max_session_len);
    let utterances = (1..=len)
        .map(|t| {
            let n = r.gen_range(channel.min_len..=channel.max_len);
            let mut reference = Vec::with_capacity(n);
            let mut obs = Vec::with_capacity(n);
            let mut noise = Vec::with_capacity(n);
            for _ in 0..n {
                if r.gen_bool(channel.topic_density) {
                    let (pair, tok) = topic[r.gen_range(0..topic.len())];
                    reference.push(tok);
                    obs.push(if r.gen_bool(channel.ambiguity) {
                        vocab.ambiguous_symbol(pair)
                    } else {
                        vocab.symbol_of(tok)
                    });
                } else {
                    let tok = vocab.common_token(r.gen_range(0..vocab.num_common));
                    reference.push(tok);
                    obs.push(vocab.symbol_of(tok));
                }
                noise.push(
                    (0..cfg.feature_dim)
                        .map(|_| (normal.sample(&mut r) * channel.noise) as f32)
                        .collect(),
                );
            }
            Utterance {
                session_id: id.clone(),
                t,
                obs,
                noise,
                reference,
                teacher_hyp: None,
            }
        })
        .collect();
    Session { id, topic, utterances }
}

/// Train/dev/test/out-of-domain splits with teacher hypotheses attached.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus, DataError> {
    cfg.validate()?;
    let ood = cfg.ood();
    let split = |prefix: &str, n: usize, channel: &ChannelConfig| -> Result<Vec<Session>, DataError> {
        let split_seed = rng::derive(seed, prefix, 0);
        (0..n)
            .map(|i| {
                let mut s = generate_session(cfg, channel, format!("{prefix}-{i:05}"), split_seed);
                for u in &mut s.utterances {
                    let hyp = super::teacher_decode(&cfg.vocab, u, cfg.teacher_epsilon, seed)?;
                    u.teacher_hyp = Some(hyp);
                }
                Ok(s)
            })
            .collect()
    };
    Ok(Corpus {
        train: split("tr", cfg.sizes.train, &cfg.channel)?,
        dev: split("dv", cfg.sizes.dev, &cfg.channel)?,
        test: split("ts", cfg.sizes.test, &cfg.channel)?,
        ood: split("od", cfg.sizes.ood, &ood)?,
    })
}
