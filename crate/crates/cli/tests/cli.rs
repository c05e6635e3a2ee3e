mod support;

use serde_json::Value;
use support::*;

fn lines(path: &std::path::Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn end_to_end_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let pl = pipeline(dir.path(), 3);
    for split in ["train", "dev", "test", "ood"] {
        let file = lines(&pl.path(&format!("data/{split}.jsonl")));
        assert_eq!(file[0]["kind"], "corpus");
        assert_eq!(file[0]["split"], split);
        assert_eq!(file[0]["seed"], 3);
        assert!(file.len() > 1);
    }
    let log = lines(&pl.path("s2.ckpt.log.jsonl"));
    assert_eq!(log[0]["kind"], "train-log");
    assert_eq!(log[0]["stage"], "2");
    assert_eq!(log.len(), 1 + 3);

    let pairs = lines(&pl.path("pairs.jsonl"));
    assert_eq!(pairs[0]["kind"], "pairs");
    assert_eq!(pairs[0]["threshold"], 0.0);
    assert_eq!(pairs[0]["count"].as_u64().unwrap() as usize, pairs.len() - 1);
    for p in &pairs[1..] {
        assert!(p["wer"].as_f64().unwrap() > 0.0);
        for key in ["session_id", "t", "context", "chosen", "rejected"] {
            assert!(p.get(key).is_some(), "missing {key}");
        }
    }

    let e = write(dir.path(), "eval.toml", &eval_section("s3.ckpt", "[0.0, 0.5]"));
    ok(command("eval", &e, 3, &pl.path("report.jsonl")));
    let report = lines(&pl.path("report.jsonl"));
    assert_eq!(report[0]["kind"], "report");
    let rows = &report[1..];
    assert_eq!(rows.len(), 2 * 18);
    assert_eq!(report[0]["rows"], 36);
    for row in rows {
        let attack = row["source"] == "attack";
        for key in ["Attacks/o", "Attacks/w", "Gap"] {
            assert_eq!(row.get(key).is_some(), attack, "{row}");
        }
        assert_eq!(row["checkpoint"], "m");
        assert!(row["wer"].as_f64().unwrap() >= 0.0);
    }
    let n0: Vec<&Value> = rows.iter().filter(|r| r["n"] == 0 && r["gamma"] == 0.0).collect();
    assert_eq!(n0.len(), 3);
    assert!(n0.iter().all(|r| r["wer"] == n0[0]["wer"]));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = pipeline(a.path(), 11);
    let pb = pipeline(b.path(), 11);
    for f in [
        "data/train.jsonl",
        "data/ood.jsonl",
        "s0.ckpt",
        "s2.ckpt",
        "s2.ckpt.log.jsonl",
        "pairs.jsonl",
        "s3.ckpt",
    ] {
        assert_eq!(std::fs::read(pa.path(f)).unwrap(), std::fs::read(pb.path(f)).unwrap(), "{f} differs");
    }
    let c = tempfile::tempdir().unwrap();
    let pc = pipeline(c.path(), 12);
    assert_ne!(std::fs::read(pa.path("data/train.jsonl")).unwrap(), std::fs::read(pc.path("data/train.jsonl")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pl = pipeline(d, 5);

    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["train", "--config", "x.toml"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);

    let bad = write(d, "bad.toml", "[corpus]\nbogus = 1\n");
    assert_eq!(code(&command("gen-data", &bad, 1, &d.join("x"))), 1);
    let missing = d.join("missing.toml");
    assert_eq!(code(&command("gen-data", &missing, 1, &d.join("x"))), 1);
    let gen = write(d, "gen2.toml", BASE);
    assert_eq!(code(&command("gen-data", &gen, 5, &pl.path("data"))), 2);
    ok(run(&[
        "gen-data",
        "--config",
        gen.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        pl.path("data").to_str().unwrap(),
        "--force",
    ]));

    let wrong = write(
        d,
        "wrong.toml",
        &train_section("data/train.jsonl", Some("s0.ckpt"), None, &train_config("2", "teacher", 0.5)),
    );
    assert_eq!(code(&command("train", &wrong, 5, &d.join("w.ckpt"))), 2);
    let fresh3 = write(
        d,
        "fresh3.toml",
        &train_section("data/train.jsonl", Some("s2.ckpt"), None, &train_config("3-dpo", "teacher", 0.0)),
    );
    assert_eq!(code(&command("train", &fresh3, 5, &d.join("w.ckpt"))), 2);
    assert!(!d.join("w.ckpt").exists());

    let none = write(d, "mine-none.toml", &mine_section(1e9));
    let out = command("mine", &none, 5, &d.join("none.jsonl"));
    assert_eq!(code(&out), 3);
    let header = lines(&d.join("none.jsonl"));
    assert_eq!(header.len(), 1);
    assert_eq!(header[0]["threshold"], 1e9);

    let not_s2 = write(d, "mine-s1.toml", &mine_section(0.0).replace("s2.ckpt", "s1.ckpt"));
    assert_eq!(code(&command("mine", &not_s2, 5, &d.join("m1.jsonl"))), 2);

    let e = write(d, "eval-s2.toml", &eval_section("s2.ckpt", "[0.5]"));
    assert_eq!(code(&command("eval", &e, 5, &d.join("r.jsonl"))), 2);
    let e = write(d, "eval-ok.toml", &eval_section("s2.ckpt", "[0.0]"));
    ok(command("eval", &e, 5, &d.join("r.jsonl")));
    assert_eq!(lines(&d.join("r.jsonl")).len(), 1 + 18);
    assert_eq!(code(&command("eval", &e, 5, &d.join("r.jsonl"))), 2);
}
