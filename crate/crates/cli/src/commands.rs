use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ctxbias::data::{generate_corpus, CorpusConfig, Session, AUDIO_SEP, EOS, TARGET_SEP};
use ctxbias::decoding::HistorySource;
use ctxbias::io::{
    check_writable, config_hash, load_checkpoint, read_corpus, read_jsonl, save_checkpoint, session_records, write_jsonl,
    CheckpointMeta, Header, IoError,
};
use ctxbias::metrics::{evaluate, sweep_threshold, EvalSettings, ThresholdSweep};
use ctxbias::model::{Engine, ModelConfig, PolicyModel, SpecialTokens};
use ctxbias::rng;
use ctxbias::training::{decode_candidates, mine_hard_negatives, train_stage, PreferencePair, Stage, TrainConfig, TrainError};
use serde_json::Value;

use crate::config::{resolve, RunConfig};
use crate::Common;

pub enum Outcome {
    Done,
    /// Completed, but the result is empty.
    Empty(String),
}

/// Unmet precondition on inputs or outputs (exit status 2).
#[derive(Debug)]
pub struct Precondition(pub String);

impl std::fmt::Display for Precondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Precondition {}

fn precondition(msg: impl Into<String>) -> anyhow::Error {
    Precondition(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Precondition>() {
            return 2;
        }
        if let Some(IoError::Exists(_)) = cause.downcast_ref::<IoError>() {
            return 2;
        }
        if let Some(TrainError::StageMismatch { .. }) = cause.downcast_ref::<TrainError>() {
            return 2;
        }
    }
    1
}

fn load(c: &Common) -> Result<(RunConfig, PathBuf, String)> {
    let (cfg, base) = RunConfig::load(&c.config)?;
    let hash = config_hash(&cfg);
    Ok((cfg, base, hash))
}

/// Corpus split plus the corpus config recorded in its header.
fn corpus_file(path: &Path) -> Result<(CorpusConfig, Vec<Session>)> {
    let (h, sessions) = read_corpus(path)?;
    if h.kind != "corpus" {
        bail!("{} is a {} file, not a corpus", path.display(), h.kind);
    }
    let cfg = h
        .extra
        .get("corpus")
        .cloned()
        .ok_or_else(|| anyhow!("{} header lacks the corpus config", path.display()))?;
    Ok((serde_json::from_value(cfg)?, sessions))
}

pub fn gen_data(c: &Common) -> Result<Outcome> {
    let (cfg, _, hash) = load(c)?;
    let corpus = generate_corpus(&cfg.corpus, c.seed)?;
    let paths: Vec<PathBuf> = corpus.splits().iter().map(|(n, _)| c.out.join(format!("{n}.jsonl"))).collect();
    for p in &paths {
        check_writable(p, c.force)?;
    }
    for ((name, split), path) in corpus.splits().iter().zip(&paths) {
        let header = Header::new("corpus", &hash, c.seed)
            .with("split", name)
            .with("sessions", split.len())
            .with("corpus", &cfg.corpus);
        write_jsonl(path, &header, session_records(split))?;
        log::info!("wrote {} ({} sessions)", path.display(), split.len());
    }
    Ok(Outcome::Done)
}

fn fresh_model(cfg: &RunConfig, corpus: &CorpusConfig, seed: u64) -> Result<PolicyModel> {
    let base = cfg.model.clone().unwrap_or_else(|| {
        ModelConfig::new(
            corpus.vocab.size(),
            corpus.feature_dim,
            SpecialTokens {
                eos: EOS,
                audio_sep: AUDIO_SEP,
                target_sep: TARGET_SEP,
            },
        )
    });
    let config = ModelConfig {
        init_seed: rng::derive(seed, "init", 0),
        ..base
    };
    Ok(PolicyModel::new(config, &corpus.vocab.symbol_kinds())?)
}

fn log_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".log.jsonl");
    out.with_file_name(name)
}

pub fn train(c: &Common) -> Result<Outcome> {
    let (cfg, base, hash) = load(c)?;
    let sec = cfg.train.as_ref().ok_or_else(|| anyhow!("config has no [train] section"))?;
    let tc = TrainConfig {
        seed: c.seed,
        ..sec.config.clone()
    };
    let (corpus_cfg, sessions) = corpus_file(&resolve(&base, &sec.corpus))?;
    let (model, init_stage) = match &sec.init {
        Some(p) => {
            let (m, meta) = load_checkpoint(&resolve(&base, p))?;
            (m, Some(meta.stage))
        }
        None => (fresh_model(&cfg, &corpus_cfg, c.seed)?, None),
    };
    let pairs: Vec<PreferencePair> = match (tc.stage, &sec.pairs) {
        (Stage::Dpo | Stage::Sft2, Some(p)) => read_jsonl(&resolve(&base, p))?.1,
        (Stage::Dpo | Stage::Sft2, None) => return Err(precondition(format!("stage {} needs a pairs file", tc.stage))),
        _ => Vec::new(),
    };
    let logs = log_path(&c.out);
    check_writable(&c.out, c.force)?;
    check_writable(&logs, c.force)?;
    let out = train_stage(&tc, model, init_stage, &corpus_cfg.vocab, &sessions, &pairs)?;
    let meta = CheckpointMeta {
        stage: tc.stage,
        config_hash: hash.clone(),
        seed: c.seed,
        steps: tc.max_steps,
    };
    save_checkpoint(&c.out, &out.model, &meta)?;
    let header = Header::new("train-log", &hash, c.seed).with("stage", tc.stage.tag());
    write_jsonl(&logs, &header, &out.log)?;
    log::info!("wrote {}", c.out.display());
    Ok(Outcome::Done)
}

fn stage2_checkpoint(path: &Path) -> Result<PolicyModel> {
    let (model, meta) = load_checkpoint(path)?;
    if meta.stage != Stage::Sft {
        return Err(precondition(format!(
            "{} is a stage {} checkpoint, expected stage {}",
            path.display(),
            meta.stage,
            Stage::Sft
        )));
    }
    Ok(model)
}

pub fn mine(c: &Common) -> Result<Outcome> {
    let (cfg, base, hash) = load(c)?;
    let sec = cfg.mine.as_ref().ok_or_else(|| anyhow!("config has no [mine] section"))?;
    let (_, sessions) = corpus_file(&resolve(&base, &sec.corpus))?;
    let model = stage2_checkpoint(&resolve(&base, &sec.checkpoint))?;
    check_writable(&c.out, c.force)?;
    let engine = Engine::new(&model, 0.0)?;
    let result = mine_hard_negatives(&engine, &sessions, sec.n, sec.threshold, sec.source, &sec.decode)?;
    let header = Header::new("pairs", &hash, c.seed)
        .with("threshold", result.threshold)
        .with("source", result.source)
        .with("n", sec.n)
        .with("count", result.pairs.len());
    write_jsonl(&c.out, &header, &result.pairs)?;
    if result.is_empty() {
        return Ok(Outcome::Empty(format!("no pairs above threshold {}", sec.threshold)));
    }
    Ok(Outcome::Done)
}

fn tagged(mut v: Value, key: &str, value: impl Into<Value>) -> Value {
    if let Some(o) = v.as_object_mut() {
        o.insert(key.to_string(), value.into());
    }
    v
}

pub fn eval(c: &Common) -> Result<Outcome> {
    let (cfg, base, hash) = load(c)?;
    let sec = cfg.eval.as_ref().ok_or_else(|| anyhow!("config has no [eval] section"))?;
    let mut corpora = Vec::new();
    for (name, p) in &sec.corpora {
        corpora.push((name.as_str(), corpus_file(&resolve(&base, p))?.1));
    }
    for name in &sec.ood {
        if !sec.corpora.contains_key(name) {
            bail!("ood corpus {name} is not listed in corpora");
        }
    }
    let mut models = Vec::new();
    for (name, p) in &sec.checkpoints {
        let (m, _) = load_checkpoint(&resolve(&base, p))?;
        if m.refine_adapter().is_none() && sec.gammas.iter().any(|&g| g != 0.0) {
            return Err(precondition(format!(
                "checkpoint {name} has no preference adapter but non-zero gamma was requested"
            )));
        }
        models.push((name.as_str(), m));
    }
    check_writable(&c.out, c.force)?;
    let settings = EvalSettings {
        decode: sec.decode.clone(),
        seed: c.seed,
    };
    let mut records = Vec::new();
    for (name, model) in &models {
        for &gamma in &sec.gammas {
            let mut all = ctxbias::metrics::EvalReport::default();
            for (corpus, sessions) in &corpora {
                for &n in &sec.ns {
                    all.merge(evaluate(model, corpus, sessions, n, &sec.sources, gamma, &settings)?);
                }
            }
            records.extend(all.records().into_iter().map(|r| tagged(r, "checkpoint", *name)));
            if !sec.ood.is_empty() {
                let ood: Vec<&str> = sec.ood.iter().map(String::as_str).collect();
                for &n in &sec.ns {
                    for &source in &sec.sources {
                        if let Some(wer) = all.average(&ood, n, source, gamma) {
                            records.push(serde_json::json!({
                                "condition": format!("ood-average/n={n}/{source}/gamma={gamma}"),
                                "checkpoint": name,
                                "corpus": "ood-average",
                                "n": n,
                                "source": source,
                                "gamma": gamma,
                                "wer": wer,
                                "gap": null,
                                "seed": c.seed,
                            }));
                        }
                    }
                }
            }
        }
    }
    if let Some(ts) = &sec.threshold_sweep {
        let stage2 = &models
            .iter()
            .find(|(n, _)| *n == ts.checkpoint)
            .ok_or_else(|| anyhow!("threshold sweep checkpoint {} is not listed", ts.checkpoint))?
            .1;
        let (eval_name, eval_sessions) = corpora
            .iter()
            .find(|(n, _)| *n == ts.corpus)
            .ok_or_else(|| anyhow!("threshold sweep corpus {} is not listed", ts.corpus))?;
        let (corpus_cfg, train) = corpus_file(&resolve(&base, &ts.train_corpus))?;
        let candidates = decode_candidates(&Engine::new(stage2, 0.0)?, &train, ts.n, ts.source, &sec.decode)
            .context("decoding mining candidates")?;
        let sweep = ThresholdSweep {
            thresholds: ts.thresholds.clone(),
            gamma_grid: ts.gammas.clone(),
            n: ts.n,
            sources: vec![HistorySource::Predicted],
            dpo: TrainConfig {
                seed: c.seed,
                ..ts.dpo.clone()
            },
        };
        let runs = sweep_threshold(stage2, &candidates, &sweep, &corpus_cfg.vocab, &train, eval_name, eval_sessions, &settings, Vec::new())?;
        for run in runs {
            if run.reports.is_empty() {
                records.push(serde_json::json!({
                    "condition": format!("threshold={}", run.threshold),
                    "threshold": run.threshold,
                    "pairs": 0,
                    "seed": c.seed,
                }));
            }
            for r in &run.reports {
                for rec in r.records() {
                    records.push(tagged(tagged(rec, "threshold", run.threshold), "pairs", run.pairs));
                }
            }
        }
    }
    let header = Header::new("report", &hash, c.seed).with("rows", records.len());
    write_jsonl(&c.out, &header, &records)?;
    if records.is_empty() {
        return Ok(Outcome::Empty("evaluation grid is empty".into()));
    }
    Ok(Outcome::Done)
}
