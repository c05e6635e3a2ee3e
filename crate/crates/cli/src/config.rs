use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ctxbias::data::CorpusConfig;
use ctxbias::decoding::{DecodeConfig, HistorySource};
use ctxbias::model::ModelConfig;
use ctxbias::training::TrainConfig;
use serde::{Deserialize, Serialize};

fn teacher() -> HistorySource {
    HistorySource::Teacher
}

fn zero_gamma() -> Vec<f64> {
    vec![0.0]
}

/// Run configuration. Each command reads its own section; relative paths
/// are resolved against the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub corpus: CorpusConfig,
    /// Architecture for a fresh stage-0 model; derived from the corpus when
    /// absent.
    pub model: Option<ModelConfig>,
    pub train: Option<TrainSection>,
    pub mine: Option<MineSection>,
    pub eval: Option<EvalSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Training split written by `gen-data`.
    pub corpus: PathBuf,
    /// Checkpoint of the preceding stage.
    pub init: Option<PathBuf>,
    /// Preference pairs written by `mine`, for the third stage.
    pub pairs: Option<PathBuf>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MineSection {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub n: usize,
    pub threshold: f64,
    #[serde(default = "teacher")]
    pub source: HistorySource,
    #[serde(default)]
    pub decode: DecodeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub corpora: BTreeMap<String, PathBuf>,
    pub ns: Vec<usize>,
    pub sources: Vec<HistorySource>,
    #[serde(default = "zero_gamma")]
    pub gammas: Vec<f64>,
    #[serde(default)]
    pub decode: DecodeConfig,
    /// Corpora averaged into one extra row per condition.
    #[serde(default)]
    pub ood: Vec<String>,
    pub threshold_sweep: Option<ThresholdSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSection {
    /// Name of the stage-2 entry in `checkpoints`.
    pub checkpoint: String,
    pub train_corpus: PathBuf,
    /// Name of the evaluation entry in `corpora`.
    pub corpus: String,
    pub n: usize,
    #[serde(default = "teacher")]
    pub source: HistorySource,
    pub thresholds: Vec<f64>,
    pub gammas: Vec<f64>,
    pub dpo: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
