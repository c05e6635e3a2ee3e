#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_ctxbias");

/// Corpus and model sections small enough for a full pipeline in seconds.
pub const BASE: &str = r#"
[corpus]
active_pairs = 1
min_session_len = 2
max_session_len = 3
feature_dim = 4
teacher_epsilon = 0.3

[corpus.vocab]
num_pairs = 2
num_common = 3

[corpus.channel]
ambiguity = 0.5
noise = 0.5
topic_density = 0.5
min_len = 2
max_len = 4

[corpus.sizes]
train = 6
dev = 2
test = 3
ood = 2

[model]
vocab_size = 13
model_dim = 16
num_layers = 1
num_heads = 2
ffn_dim = 32
feature_dim = 4
max_seq_len = 64
lora_rank = 2
lora_alpha = 4.0
adapter_targets = ["query", "value"]
init_seed = 0

[model.special]
eos = 1
audio_sep = 3
target_sep = 4

[model.featurizer]
seed = 7
pair_separation = 0.8
plain_scale = 1.5
"#;

pub const DECODE: &str = "beam = 2\nmax_len = 8\nlength_norm = false\n";

pub fn train_config(stage: &str, history: &str, p_drop: f64) -> String {
    let (batch, accumulation) = if stage.starts_with('3') { (2, 2) } else { (4, 1) };
    format!(
        "stage = \"{stage}\"\nhistory_source = \"{history}\"\np_drop = {p_drop:?}\nn = 2\nbatch_size = {batch}\n\
         accumulation = {accumulation}\nlearning_rate = 0.01\nwarmup_steps = 0\nbeta = 0.1\nmax_steps = 3\n"
    )
}

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Writes `text` to `dir/name` and returns the path.
pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

pub fn command(cmd: &str, config: &Path, seed: u64, out: &Path) -> Output {
    run(&[cmd, "--config", p(config), "--seed", &seed.to_string(), "--out", p(out)])
}

pub fn ok(out: Output) -> Output {
    assert_eq!(
        code(&out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every artifact of one end-to-end run, by file name.
pub struct Pipeline {
    pub dir: PathBuf,
}

impl Pipeline {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

pub fn train_section(corpus: &str, init: Option<&str>, pairs: Option<&str>, config: &str) -> String {
    let mut s = format!("{BASE}\n[train]\ncorpus = \"{corpus}\"\n");
    if let Some(i) = init {
        s.push_str(&format!("init = \"{i}\"\n"));
    }
    if let Some(pp) = pairs {
        s.push_str(&format!("pairs = \"{pp}\"\n"));
    }
    s.push_str("\n[train.config]\n");
    s.push_str(config);
    s
}

pub fn mine_section(threshold: f64) -> String {
    format!(
        "{BASE}\n[mine]\ncorpus = \"data/train.jsonl\"\ncheckpoint = \"s2.ckpt\"\nn = 2\nthreshold = {threshold:?}\n\n[mine.decode]\n{DECODE}"
    )
}

pub fn eval_section(checkpoint: &str, gammas: &str) -> String {
    format!(
        "{BASE}\n[eval]\nns = [0, 1, 2, 3, 4, 5]\nsources = [\"oracle\", \"predicted\", \"attack\"]\ngammas = {gammas}\n\
         [eval.checkpoints]\nm = \"{checkpoint}\"\n[eval.corpora]\ntest = \"data/test.jsonl\"\n[eval.decode]\n{DECODE}"
    )
}

/// gen-data, stages 0–2, mining and the preference stage, all in `dir`.
pub fn pipeline(dir: &Path, seed: u64) -> Pipeline {
    let gen = write(dir, "gen.toml", BASE);
    ok(command("gen-data", &gen, seed, &dir.join("data")));
    let stages = [
        ("s0", None, train_config("0", "oracle", 0.3)),
        ("s1", Some("s0.ckpt"), train_config("1", "teacher", 0.0)),
        ("s2", Some("s1.ckpt"), train_config("2", "teacher", 0.5)),
    ];
    for (name, init, cfg) in stages {
        let c = write(dir, &format!("{name}.toml"), &train_section("data/train.jsonl", init, None, &cfg));
        ok(command("train", &c, seed, &dir.join(format!("{name}.ckpt"))));
    }
    let m = write(dir, "mine.toml", &mine_section(0.0));
    let mined = command("mine", &m, seed, &dir.join("pairs.jsonl"));
    assert!(matches!(code(&mined), 0 | 3));
    let c = write(
        dir,
        "s3.toml",
        &train_section("data/train.jsonl", Some("s2.ckpt"), Some("pairs.jsonl"), &train_config("3-dpo", "teacher", 0.0)),
    );
    if code(&mined) == 0 {
        ok(command("train", &c, seed, &dir.join("s3.ckpt")));
    }
    Pipeline { dir: dir.to_path_buf() }
}
