//! File formats.
//!
//! Record files are UTF-8 JSON lines: a header object (`kind`,
//! `config_hash`, `seed` and kind-specific fields) followed by one record
//! per line. Checkpoints are binary:
//!
//! ```text
//! "CTXB"  u32 version  u64 tensor_count
//! per tensor: u64 name_len, name, u64 rank, u64 dims[rank], f32 data[..]
//! u64 meta_len, meta: "key=value\n" lines
//! ```
//!
//! All integers and floats are little-endian. Every file is written to a
//! temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::data::{Session, Utterance};
use crate::model::{AdapterRole, ModelConfig, ModelError, PolicyModel};
use crate::training::Stage;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTXB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{} already exists (pass --force to overwrite)", .0.display())]
    Exists(PathBuf),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    sha256_hex(serde_json::to_string(config).expect("serializable config").as_bytes())
}

/// Refuses to replace an existing file unless `force`.
pub fn check_writable(path: &Path, force: bool) -> Result<(), IoError> {
    if !force && path.exists() {
        return Err(IoError::Exists(path.to_path_buf()));
    }
    Ok(())
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Header line of a record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Header {
    pub fn new(kind: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            extra: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.extra
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable"));
        self
    }
}

pub fn render_jsonl<R: Serialize>(header: &Header, records: impl IntoIterator<Item = R>) -> String {
    let mut out = serde_json::to_string(header).expect("serializable header");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(&r).expect("serializable record"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<R: Serialize>(path: &Path, header: &Header, records: impl IntoIterator<Item = R>) -> Result<(), IoError> {
    write_atomic(path, render_jsonl(header, records).as_bytes())
}

pub fn read_jsonl<R: DeserializeOwned>(path: &Path) -> Result<(Header, Vec<R>), IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parse = |line: usize, msg: String| IoError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| parse(1, "empty file".into()))?;
    let header: Header = serde_json::from_str(first).map_err(|e| parse(1, e.to_string()))?;
    let records = lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse(i + 1, e.to_string())))
        .collect::<Result<_, _>>()?;
    Ok((header, records))
}

/// One corpus line: an utterance plus its session's topic assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    #[serde(flatten)]
    pub utterance: Utterance,
    pub topic: Vec<(usize, u32)>,
}

pub fn session_records(sessions: &[Session]) -> Vec<UtteranceRecord> {
    sessions
        .iter()
        .flat_map(|s| {
            s.utterances.iter().map(|u| UtteranceRecord {
                utterance: u.clone(),
                topic: s.topic.clone(),
            })
        })
        .collect()
}

/// Regroups utterance lines into sessions, in file order.
pub fn sessions_from_records(records: Vec<UtteranceRecord>) -> Vec<Session> {
    let mut out: Vec<Session> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some(s) if s.id == r.utterance.session_id => s.utterances.push(r.utterance),
            _ => out.push(Session {
                id: r.utterance.session_id.clone(),
                topic: r.topic,
                utterances: vec![r.utterance],
            }),
        }
    }
    out
}

pub fn read_corpus(path: &Path) -> Result<(Header, Vec<Session>), IoError> {
    let (h, records) = read_jsonl::<UtteranceRecord>(path)?;
    Ok((h, sessions_from_records(records)))
}

/// Checkpoint metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
    pub steps: u64,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(model: &PolicyModel, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u64(&mut out, model.params().len() as u64);
    for (_, name, t) in model.params().iter() {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, t.shape().len() as u64);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut kv = BTreeMap::new();
    kv.insert("stage", meta.stage.tag().to_string());
    kv.insert("config_hash", meta.config_hash.clone());
    kv.insert("seed", meta.seed.to_string());
    kv.insert("steps", meta.steps.to_string());
    kv.insert("gamma", format!("{:?}", model.gamma()));
    kv.insert(
        "refine",
        model.refine_adapter().map_or("none", |a| a.role.tag()).to_string(),
    );
    kv.insert("model", serde_json::to_string(model.config()).expect("serializable config"));
    let text: String = kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_u64(&mut out, text.len() as u64);
    out.extend_from_slice(text.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| IoError::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, IoError> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| IoError::Checkpoint(format!("implausible length {v}")))
    }

    fn text(&mut self, n: usize) -> Result<&'a str, IoError> {
        std::str::from_utf8(self.take(n)?).map_err(|e| IoError::Checkpoint(e.to_string()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(PolicyModel, CheckpointMeta), IoError> {
    let bad = |m: String| IoError::Checkpoint(m);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.len()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.len()?;
        let name = r.text(n)?.to_string();
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.saturating_mul(4) <= bytes.len())
            .ok_or_else(|| bad(format!("tensor {name} too large")))?;
        let data = r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?));
    }
    let n = r.len()?;
    let text = r.text(n)?;
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("missing metadata key {k}")));
    let stage = Stage::parse(get("stage")?).ok_or_else(|| bad("unknown stage".into()))?;
    let num = |k: &str| get(k)?.parse::<u64>().map_err(|e| bad(format!("{k}: {e}")));
    let meta = CheckpointMeta {
        stage,
        config_hash: get("config_hash")?.to_string(),
        seed: num("seed")?,
        steps: num("steps")?,
    };
    let gamma: f64 = get("gamma")?.parse().map_err(|e| bad(format!("gamma: {e}")))?;
    let refine = match get("refine")? {
        "none" => None,
        tag => Some(AdapterRole::parse(tag).ok_or_else(|| bad(format!("unknown adapter role {tag}")))?),
    };
    let config: ModelConfig = serde_json::from_str(get("model")?).map_err(|e| bad(format!("model: {e}")))?;
    let model = PolicyModel::from_named(config, &tensors, refine, gamma)?;
    Ok((model, meta))
}

pub fn save_checkpoint(path: &Path, model: &PolicyModel, meta: &CheckpointMeta) -> Result<(), IoError> {
    write_atomic(path, &encode_checkpoint(model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyModel, CheckpointMeta), IoError> {
    decode_checkpoint(&fs::read(path).map_err(io_err(path))?)
}
