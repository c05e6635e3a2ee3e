//! The full protocol for one seed: corpus, the staged training runs,
//! mining, preference refinement and the evaluations built on them.

use serde::{Deserialize, Serialize};

use crate::data::{generate_corpus, Corpus, CorpusConfig, DataError, AUDIO_SEP, EOS, TARGET_SEP};
use crate::decoding::{DecodeConfig, DecodeError, HistorySource};
use crate::metrics::{
    evaluate, sweep_gamma, sweep_threshold, EvalReport, EvalSettings, ThresholdRun, ThresholdSweep, DEFAULT_GAMMA_GRID,
    DEFAULT_THRESHOLDS,
};
use crate::model::{Engine, ModelConfig, ModelError, PolicyModel, SpecialTokens};
use crate::rng;
use crate::training::{
    decode_candidates, filter_pairs, train_stage, PreferencePair, Stage, TrainConfig, TrainError, TrainLogRecord,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("no preference pairs above threshold {0}")]
    NoPairs(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub backbone: TrainConfig,
    pub projector: TrainConfig,
    /// Stage 2 with teacher history and context dropout.
    pub sft: TrainConfig,
    /// Stage 2 with oracle history and no dropout.
    pub sft_oracle: TrainConfig,
    pub dpo: TrainConfig,
    pub sft2: TrainConfig,
    pub decode: DecodeConfig,
    pub n: usize,
    /// Mining threshold of the main preference run, in percent.
    pub threshold: f64,
    pub gamma_grid: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let model = ModelConfig::new(
            corpus.vocab.size(),
            corpus.feature_dim,
            SpecialTokens {
                eos: EOS,
                audio_sep: AUDIO_SEP,
                target_sep: TARGET_SEP,
            },
        );
        Self {
            corpus,
            model,
            backbone: TrainConfig::for_stage(Stage::Backbone),
            projector: TrainConfig::for_stage(Stage::Projector),
            sft: TrainConfig::for_stage(Stage::Sft),
            sft_oracle: TrainConfig {
                history_source: HistorySource::Oracle,
                p_drop: 0.0,
                ..TrainConfig::for_stage(Stage::Sft)
            },
            dpo: TrainConfig::for_stage(Stage::Dpo),
            sft2: TrainConfig::for_stage(Stage::Sft2),
            decode: DecodeConfig::default(),
            n: 2,
            threshold: 0.0,
            gamma_grid: DEFAULT_GAMMA_GRID.to_vec(),
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

impl ExperimentConfig {
    /// Model config with its init seed derived from `seed`.
    pub fn model_for(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            init_seed: rng::derive(seed, "init", 0),
            ..self.model.clone()
        }
    }

    /// `base` with its seed derived from `(seed, label)`.
    pub fn seeded(base: &TrainConfig, seed: u64, label: &str) -> TrainConfig {
        TrainConfig {
            seed: rng::derive(seed, label, 0),
            ..base.clone()
        }
    }
}

/// Every model and intermediate of one seed's run.
#[derive(Clone, Debug)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub corpus: Corpus,
    pub backbone: PolicyModel,
    pub projector: PolicyModel,
    pub sft: PolicyModel,
    pub sft_oracle: PolicyModel,
    /// Every decoded training utterance, before thresholding.
    pub candidates: Vec<PreferencePair>,
    pub pairs: Vec<PreferencePair>,
    pub dpo: PolicyModel,
    pub sft2: PolicyModel,
    pub logs: Vec<(String, Vec<TrainLogRecord>)>,
}

pub fn train_pipeline(cfg: &ExperimentConfig, seed: u64) -> Result<SeedArtifacts, ExperimentError> {
    let corpus = generate_corpus(&cfg.corpus, seed)?;
    let vocab = &cfg.corpus.vocab;
    let train = &corpus.train;
    let mut logs = Vec::new();
    let mut run = |name: &str, tc: &TrainConfig, model: PolicyModel, init: Option<Stage>, pairs: &[PreferencePair]| {
        let tc = ExperimentConfig::seeded(tc, seed, &format!("train/{name}"));
        let out = train_stage(&tc, model, init, vocab, train, pairs)?;
        log::info!(
            "seed {seed} {name}: loss {:.4} -> {:.4}",
            out.log.first().map_or(f64::NAN, |r| r.loss),
            out.log.last().map_or(f64::NAN, |r| r.loss)
        );
        logs.push((name.to_string(), out.log));
        Ok::<_, ExperimentError>(out.model)
    };
    let fresh = PolicyModel::new(cfg.model_for(seed), &vocab.symbol_kinds())?;
    let backbone = run("backbone", &cfg.backbone, fresh, None, &[])?;
    let projector = run("projector", &cfg.projector, backbone.clone(), Some(Stage::Backbone), &[])?;
    let sft = run("sft", &cfg.sft, projector.clone(), Some(Stage::Projector), &[])?;
    let sft_oracle = run("sft-oracle", &cfg.sft_oracle, projector.clone(), Some(Stage::Projector), &[])?;
    let candidates = decode_candidates(&Engine::new(&sft, 0.0)?, train, cfg.n, HistorySource::Teacher, &cfg.decode)?;
    let pairs = filter_pairs(&candidates, cfg.threshold);
    if pairs.is_empty() {
        return Err(ExperimentError::NoPairs(cfg.threshold));
    }
    log::info!("seed {seed}: {} pairs from {} candidates", pairs.len(), candidates.len());
    let dpo = run("dpo", &cfg.dpo, sft.clone(), Some(Stage::Sft), &pairs)?;
    let sft2 = run("sft2", &cfg.sft2, sft.clone(), Some(Stage::Sft), &pairs)?;
    Ok(SeedArtifacts {
        seed,
        corpus,
        backbone,
        projector,
        sft,
        sft_oracle,
        candidates,
        pairs,
        dpo,
        sft2,
        logs,
    })
}

/// Headline numbers of one seed; WERs are on the test split at `N = n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub oracle_model: EvalReport,
    pub sft: EvalReport,
    pub dpo: EvalReport,
    pub sft2: EvalReport,
    /// Composition strength picked on dev, over the non-zero grid values.
    pub selected_gamma: f64,
    /// Test-split sweep of the preference model, predicted history.
    pub gamma_sweep: Vec<EvalReport>,
    pub thresholds: Vec<ThresholdRun>,
}

const CLEAN_AND_ATTACKED: [HistorySource; 3] = [HistorySource::Oracle, HistorySource::Predicted, HistorySource::Attack];

/// `γ` of the lowest-WER report among those with `γ > 0`.
pub fn select_gamma(reports: &[EvalReport]) -> Option<f64> {
    reports
        .iter()
        .filter_map(|r| r.conditions.first())
        .filter(|c| c.gamma > 0.0)
        .min_by(|a, b| a.wer.total_cmp(&b.wer))
        .map(|c| c.gamma)
}

pub fn evaluate_pipeline(cfg: &ExperimentConfig, art: &SeedArtifacts, with_thresholds: bool) -> Result<SeedSummary, ExperimentError> {
    let settings = EvalSettings {
        decode: cfg.decode.clone(),
        seed: rng::derive(art.seed, "eval", 0),
    };
    let test = &art.corpus.test;
    let n = cfg.n;
    let predicted = [HistorySource::Predicted];
    let dev_sweep = sweep_gamma(&art.dpo, "dev", &art.corpus.dev, &cfg.gamma_grid, n, &predicted, &settings)?;
    let selected_gamma = select_gamma(&dev_sweep).unwrap_or(1.0);
    let oracle_model = evaluate(&art.sft_oracle, "test", test, n, &CLEAN_AND_ATTACKED, 0.0, &settings)?;
    let sft = evaluate(&art.sft, "test", test, n, &CLEAN_AND_ATTACKED, 0.0, &settings)?;
    let dpo = evaluate(&art.dpo, "test", test, n, &CLEAN_AND_ATTACKED, selected_gamma, &settings)?;
    let sft2 = evaluate(&art.sft2, "test", test, n, &CLEAN_AND_ATTACKED, 1.0, &settings)?;
    let gamma_sweep = sweep_gamma(&art.dpo, "test", test, &cfg.gamma_grid, n, &predicted, &settings)?;
    let thresholds = if with_thresholds {
        let sweep = ThresholdSweep {
            thresholds: cfg.thresholds.clone(),
            gamma_grid: cfg.gamma_grid.clone(),
            n,
            sources: predicted.to_vec(),
            dpo: ExperimentConfig::seeded(&cfg.dpo, art.seed, "train/dpo"),
        };
        sweep_threshold(
            &art.sft,
            &art.candidates,
            &sweep,
            &cfg.corpus.vocab,
            &art.corpus.train,
            "test",
            test,
            &settings,
            vec![(art.pairs.clone(), gamma_sweep.clone())],
        )?
    } else {
        Vec::new()
    };
    Ok(SeedSummary {
        seed: art.seed,
        oracle_model,
        sft,
        dpo,
        sft2,
        selected_gamma,
        gamma_sweep,
        thresholds,
    })
}
