mod common;

use common::{adapted_model, short_decode, tiny_corpus_config};
use ctxbias::data::generate_corpus;
use ctxbias::decoding::HistorySource;
use ctxbias::experiment::select_gamma;
use ctxbias::metrics::{corpus_wer, evaluate, sweep_gamma, wer, EvalSettings, WerResult};
use proptest::prelude::*;

/// Exhaustive edit-path enumeration. Paths are compared by total cost,
/// then by their reversed step sequence with diagonal < insert < delete.
fn oracle(r: &[u8], h: &[u8]) -> (usize, usize, usize) {
    type Best = Option<(usize, Vec<u8>, (usize, usize, usize))>;
    fn walk(r: &[u8], h: &[u8], i: usize, j: usize, path: &mut Vec<(u8, bool)>, best: &mut Best) {
        if i == r.len() && j == h.len() {
            let (mut s, mut ins, mut del) = (0, 0, 0);
            for &(k, hit) in path.iter() {
                match k {
                    0 if !hit => s += 1,
                    1 => ins += 1,
                    2 => del += 1,
                    _ => {}
                }
            }
            let cost = s + ins + del;
            let key: Vec<u8> = path.iter().rev().map(|p| p.0).collect();
            let better = match best {
                None => true,
                Some((c, k, _)) => cost < *c || (cost == *c && key < *k),
            };
            if better {
                *best = Some((cost, key, (s, ins, del)));
            }
            return;
        }
        if i < r.len() && j < h.len() {
            path.push((0, r[i] == h[j]));
            walk(r, h, i + 1, j + 1, path, best);
            path.pop();
        }
        if j < h.len() {
            path.push((1, false));
            walk(r, h, i, j + 1, path, best);
            path.pop();
        }
        if i < r.len() {
            path.push((2, false));
            walk(r, h, i + 1, j, path, best);
            path.pop();
        }
    }
    let mut best = None;
    walk(r, h, 0, 0, &mut Vec::new(), &mut best);
    best.unwrap().2
}

fn seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..=6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn wer_matches_exhaustive_alignment(r in seq(), h in seq()) {
        let got = wer(&r, &h);
        let (s, i, d) = oracle(&r, &h);
        prop_assert_eq!((got.substitutions, got.insertions, got.deletions), (s, i, d));
        prop_assert_eq!(got.wer, 100.0 * (s + i + d) as f64 / r.len().max(1) as f64);
    }

    #[test]
    fn wer_is_zero_iff_equal(r in seq(), h in seq()) {
        prop_assert_eq!(wer(&r, &h).wer == 0.0, r == h);
    }

    #[test]
    fn corpus_wer_is_order_invariant(pairs in prop::collection::vec((seq(), seq()), 1..8)) {
        let results: Vec<WerResult> = pairs.iter().map(|(r, h)| wer(r, h)).collect();
        let mut rev = results.clone();
        rev.reverse();
        let a = corpus_wer(&results);
        let b = corpus_wer(&rev);
        prop_assert_eq!(a, b);
        let edits: usize = results.iter().map(|r| r.edits()).sum();
        prop_assert_eq!(a.edits(), edits);
    }
}

#[test]
fn report_rows_and_gap() {
    let cfg = tiny_corpus_config(5);
    let corpus = generate_corpus(&cfg, 2).unwrap();
    let model = adapted_model(2);
    let settings = EvalSettings {
        decode: short_decode(),
        seed: 9,
    };
    let all = [HistorySource::Oracle, HistorySource::Predicted, HistorySource::Attack];
    let r = evaluate(&model, "test", &corpus.test, 2, &all, 0.25, &settings).unwrap();
    assert_eq!(r.conditions.len(), 3);
    let o = r.wer("test", 2, HistorySource::Predicted, 0.25).unwrap();
    let w = r.wer("test", 2, HistorySource::Attack, 0.25).unwrap();
    let gap = r.gap("test", 2, 0.25).unwrap();
    assert_eq!((gap.attacks_o, gap.attacks_w, gap.gap), (o, w, w - o));
    let records = r.records();
    for rec in &records {
        let attack = rec["source"] == "attack";
        assert_eq!(rec.get("Gap").is_some(), attack);
        assert_eq!(rec.get("Attacks/o").is_some(), attack);
        assert_eq!(rec["gamma"], 0.25);
        assert_eq!(rec["n"], 2);
    }
    assert_eq!(r, evaluate(&model, "test", &corpus.test, 2, &all, 0.25, &settings).unwrap());

    let zero = evaluate(&model, "test", &corpus.test, 0, &all, 0.25, &settings).unwrap();
    let w0: Vec<f64> = zero.conditions.iter().map(|c| c.wer).collect();
    assert!(w0.iter().all(|&x| x == w0[0]), "{w0:?}");
    assert_eq!(zero.gap("test", 0, 0.25).unwrap().gap, 0.0);
}

#[test]
fn gamma_sweep_and_selection() {
    let cfg = tiny_corpus_config(4);
    let corpus = generate_corpus(&cfg, 6).unwrap();
    let model = adapted_model(6);
    let settings = EvalSettings {
        decode: short_decode(),
        seed: 1,
    };
    let grid = [0.0, 0.5, 1.0];
    let sweep = sweep_gamma(&model, "dev", &corpus.test, &grid, 1, &[HistorySource::Predicted], &settings).unwrap();
    assert_eq!(sweep.len(), 3);
    for (r, g) in sweep.iter().zip(grid) {
        assert_eq!(r.conditions[0].gamma, g);
    }
    let best = select_gamma(&sweep).unwrap();
    assert!(best > 0.0);
    let min = sweep[1..].iter().map(|r| r.conditions[0].wer).fold(f64::INFINITY, f64::min);
    let chosen = sweep.iter().find(|r| r.conditions[0].gamma == best).unwrap();
    assert_eq!(chosen.conditions[0].wer, min);
    assert_eq!(select_gamma(&sweep[..1]), None);
}

#[test]
fn average_over_corpora() {
    let cfg = tiny_corpus_config(3);
    let corpus = generate_corpus(&cfg, 8).unwrap();
    let model = adapted_model(8);
    let settings = EvalSettings {
        decode: short_decode(),
        seed: 1,
    };
    let src = [HistorySource::Predicted];
    let mut r = evaluate(&model, "a", &corpus.test, 1, &src, 0.0, &settings).unwrap();
    r.merge(evaluate(&model, "b", &corpus.train, 1, &src, 0.0, &settings).unwrap());
    let a = r.wer("a", 1, HistorySource::Predicted, 0.0).unwrap();
    let b = r.wer("b", 1, HistorySource::Predicted, 0.0).unwrap();
    assert_eq!(r.average(&["a", "b"], 1, HistorySource::Predicted, 0.0), Some((a + b) / 2.0));
    assert_eq!(r.average(&["a", "c"], 1, HistorySource::Predicted, 0.0), None);
    assert_eq!(r.average(&[], 1, HistorySource::Predicted, 0.0), None);
}
