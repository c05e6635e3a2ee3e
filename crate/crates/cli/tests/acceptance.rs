//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! The experiment-level checks share one five-seed run of the default
//! protocol, which takes a long time on a single core.

mod support;

use std::collections::HashMap;
use std::io::Write;
use std::sync::OnceLock;

use ctxbias::autodiff::{Graph, Gradients, ParamId, ParamStore, Tensor};
use ctxbias::data::{generate_corpus, SplitSizes, Utterance};
use ctxbias::decoding::{beam_search, utterance_inputs, with_eos, ContextWindow, DecodeConfig, HistorySource};
use ctxbias::experiment::{evaluate_pipeline, train_pipeline, ExperimentConfig, SeedArtifacts, SeedSummary};
use ctxbias::metrics::{evaluate_detailed, wer, EvalReport, EvalSettings};
use ctxbias::model::{
    AdapterRole, AudioInput, GraphScorer, ModelConfig, ParamGroup, PolicyModel, PromptInputs, SpecialTokens, SymbolKind,
};
use ctxbias::rng;
use ctxbias::training::{
    apply_context_dropout, dpo_loss, preference_log_ratio, reference_log_ratio, stage_batch, train_stage,
    PreferencePair, Stage, TrainConfig, TrainExample,
};
use rand::Rng;
use support::*;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn report(id: &str, name: &str, pass: bool, detail: String) {
    // Written past the test harness capture so every line reaches the log.
    let line = format!("[{id}] {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).expect("stdout");
    out.flush().expect("stdout");
    assert!(pass, "[{id}] {name} failed: {detail}");
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct Run {
    cfg: ExperimentConfig,
    seeds: Vec<(SeedArtifacts, SeedSummary)>,
}

fn experiment() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let seeds = SEEDS
            .iter()
            .map(|&seed| {
                let t = std::time::Instant::now();
                let art = train_pipeline(&cfg, seed).expect("training pipeline");
                let summary = evaluate_pipeline(&cfg, &art, true).expect("evaluation");
                eprintln!("seed {seed} done in {:.0?}", t.elapsed());
                (art, summary)
            })
            .collect();
        Run { cfg, seeds }
    })
}

fn randomize(model: &mut PolicyModel, filter: impl Fn(&str) -> bool, scale: f32, seed: u64) {
    let mut r = rng::stream(seed, "randomize", 0);
    let ids: Vec<ParamId> = model.params().iter().filter(|(_, n, _)| filter(n)).map(|(id, _, _)| id).collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}

fn utterance_index(art: &SeedArtifacts) -> HashMap<(String, usize), Utterance> {
    art.corpus
        .train
        .iter()
        .flat_map(|s| s.utterances.iter().map(|u| ((u.session_id.clone(), u.t), u.clone())))
        .collect()
}

fn pair_inputs(model: &PolicyModel, index: &HashMap<(String, usize), Utterance>, n: usize, p: &PreferencePair) -> PromptInputs {
    let utt = &index[&(p.session_id.clone(), p.t)];
    let window = ContextWindow {
        n,
        entries: p.context.clone(),
        source: HistorySource::Teacher,
    };
    utterance_inputs(model, utt, &window).unwrap()
}

const TRAINABLE: [ParamGroup; 4] = [ParamGroup::Backbone, ParamGroup::Projector, ParamGroup::Sft, ParamGroup::Refine];

fn batch_loss(model: &PolicyModel, params: &ParamStore<f64>, batch: &[TrainExample], grads: bool) -> (f64, Option<Gradients<f64>>) {
    let trainable: &[ParamGroup] = if grads { &TRAINABLE } else { &[] };
    let mut g = Graph::new();
    let mut total = None;
    for ex in batch {
        let nll = model.build_nll(&mut g, params, &ex.inputs, &ex.target, model.gamma(), trainable).unwrap();
        total = Some(match total {
            Some(t) => g.add(t, nll).unwrap(),
            None => nll,
        });
    }
    let loss = g.scale(total.unwrap(), 1.0 / batch.len() as f64);
    let value = g.value(loss).item();
    (value, grads.then(|| g.backward(loss).unwrap()))
}

#[test]
fn c01_gradients_match_finite_differences() {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.sizes = SplitSizes {
        train: 6,
        dev: 1,
        test: 1,
        ood: 1,
    };
    let corpus = generate_corpus(&cfg.corpus, 9).unwrap();
    let mut model = PolicyModel::new(cfg.model_for(9), &cfg.corpus.vocab.symbol_kinds()).unwrap();
    model.attach_refine_adapter(AdapterRole::Dpo, 1).unwrap();
    randomize(&mut model, |n| n.starts_with("lora."), 0.1, 2);
    model.set_gamma(0.5).unwrap();
    let sft = TrainConfig {
        batch_size: 2,
        seed: 4,
        ..TrainConfig::for_stage(Stage::Sft)
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut tensors = 0usize;
    let mut r = rng::stream(3, "fd", 0);
    for b in 0..3 {
        let batch = stage_batch(&sft, &model, &cfg.corpus.vocab, &corpus.train, b, 0).unwrap();
        let base: ParamStore<f64> = model.params().cast();
        let (_, grads) = batch_loss(&model, &base, &batch, true);
        let grads = grads.unwrap();
        let ids: Vec<ParamId> = base
            .iter()
            .filter(|(id, _, _)| TRAINABLE.contains(&model.group(*id)))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            let len = base.get(id).len();
            let grad = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(base.get(id).shape()));
            let mut directions: Vec<Vec<f64>> = Vec::new();
            let unit = |i: usize| {
                let mut v = vec![0.0; len];
                v[i] = 1.0;
                v
            };
            if len <= 256 {
                directions.extend((0..len).map(unit));
            } else {
                let top = (0..len)
                    .max_by(|&a, &b| grad.data()[a].abs().total_cmp(&grad.data()[b].abs()))
                    .unwrap();
                directions.push(unit(top));
                directions.extend((0..15).map(|_| unit(r.gen_range(0..len))));
            }
            directions.push((0..len).map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect());
            for v in directions {
                let shifted = |sign: f64| {
                    let mut p = base.clone();
                    for (x, d) in p.get_mut(id).data_mut().iter_mut().zip(&v) {
                        *x += sign * h * d;
                    }
                    batch_loss(&model, &p, &batch, false).0
                };
                let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
                let an: f64 = grad.data().iter().zip(&v).map(|(g, d)| g * d).sum();
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
            tensors += 1;
        }
    }
    report(
        "1",
        "finite-difference gradients",
        worst < 1e-3,
        format!("{tensors} tensor checks over 3 batches, {checked} directions, max rel err {worst:.2e}"),
    );
}

#[test]
fn c02_zero_adapter_loss_is_ln2() {
    let run = experiment();
    let (art, _) = &run.seeds[0];
    let index = utterance_index(art);
    let mut zero = art.sft.clone();
    zero.attach_refine_adapter(AdapterRole::Dpo, 0).unwrap();
    let mut worst = 0.0f64;
    for p in &art.pairs {
        let inputs = pair_inputs(&art.sft, &index, run.cfg.dpo.n, p);
        let (yp, yn) = (with_eos(&p.chosen), with_eos(&p.rejected));
        let ref_ratio = reference_log_ratio(&art.sft, &inputs, &yp, &yn, 0.0).unwrap();
        let loss = dpo_loss(&zero, ref_ratio, &inputs, &yp, &yn, run.cfg.dpo.beta).unwrap();
        worst = worst.max((loss - std::f64::consts::LN_2).abs());
    }
    report(
        "2",
        "zero preference adapter gives ln 2",
        worst <= 1e-9,
        format!("{} pairs, max |loss - ln 2| = {worst:.1e}", art.pairs.len()),
    );
}

#[test]
fn c03_one_step_raises_preference_margin() {
    let run = experiment();
    let (art, _) = &run.seeds[0];
    let index = utterance_index(art);
    let mut zero = art.sft.clone();
    zero.attach_refine_adapter(AdapterRole::Dpo, 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-4,
        max_steps: 1,
        batch_size: 1,
        accumulation: 1,
        warmup_steps: 0,
        seed: 8,
        ..run.cfg.dpo.clone()
    };
    let mut increased = 0;
    let mut smallest = f64::INFINITY;
    let checked = art.pairs.len().min(10);
    for p in &art.pairs[..checked] {
        let trained = train_stage(&cfg, art.sft.clone(), Some(Stage::Sft), &run.cfg.corpus.vocab, &art.corpus.train, std::slice::from_ref(p))
            .unwrap();
        let inputs = pair_inputs(&art.sft, &index, cfg.n, p);
        let (yp, yn) = (with_eos(&p.chosen), with_eos(&p.rejected));
        let before = preference_log_ratio(&zero, &inputs, &yp, &yn, 1.0).unwrap();
        let after = preference_log_ratio(&trained.model, &inputs, &yp, &yn, 1.0).unwrap();
        smallest = smallest.min(after - before);
        increased += usize::from(after > before);
    }
    report(
        "3",
        "one step at lr 1e-4 raises the log ratio",
        increased == checked,
        format!("{increased}/{checked} pairs, smallest increase {smallest:.3e}"),
    );
}

/// Exhaustive edit-path enumeration. Paths are compared by total cost,
/// then by their reversed step sequence with diagonal < insert < delete.
fn edit_oracle(r: &[u8], h: &[u8]) -> (usize, usize, usize) {
    type Best = Option<(usize, Vec<u8>, (usize, usize, usize))>;
    fn walk(r: &[u8], h: &[u8], i: usize, j: usize, path: &mut Vec<(u8, bool)>, best: &mut Best) {
        if i == r.len() && j == h.len() {
            let s = path.iter().filter(|p| p.0 == 0 && !p.1).count();
            let ins = path.iter().filter(|p| p.0 == 1).count();
            let del = path.iter().filter(|p| p.0 == 2).count();
            let cost = s + ins + del;
            let key: Vec<u8> = path.iter().rev().map(|p| p.0).collect();
            if best.as_ref().is_none_or(|(c, k, _)| cost < *c || (cost == *c && key < *k)) {
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

#[test]
fn c04a_wer_matches_exhaustive_alignment() {
    let mut r = rng::stream(41, "wer-cases", 0);
    let mut matched = 0;
    for _ in 0..1000 {
        let mut seq = || -> Vec<u8> { (0..r.gen_range(0..=6)).map(|_| r.gen_range(0..4)).collect() };
        let (a, b) = (seq(), seq());
        let got = wer(&a, &b);
        let (s, i, d) = edit_oracle(&a, &b);
        let expected = 100.0 * (s + i + d) as f64 / a.len().max(1) as f64;
        if (got.substitutions, got.insertions, got.deletions) == (s, i, d) && got.wer == expected {
            matched += 1;
        }
    }
    report("4a", "WER equals exhaustive edit paths", matched == 1000, format!("{matched}/1000 exact"));
}

fn tiny_policy(seed: u64) -> PolicyModel {
    let cfg = ModelConfig {
        model_dim: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 16,
        max_seq_len: 16,
        lora_rank: 2,
        init_seed: seed,
        ..ModelConfig::new(
            4,
            4,
            SpecialTokens {
                eos: 1,
                audio_sep: 2,
                target_sep: 3,
            },
        )
    };
    let mut m = PolicyModel::new(cfg, &[SymbolKind::Plain, SymbolKind::Plain]).unwrap();
    randomize(&mut m, |n| n != "encoder.table", 1.0, seed);
    m
}

/// Best `(full sequence, score, truncated)` over every output of at most
/// three tokens: higher score first, then the smaller sequence.
fn exhaustive_decode(m: &PolicyModel, inputs: &PromptInputs) -> (Vec<u32>, f64, bool) {
    let eos = 1;
    let mut best: Option<(Vec<u32>, f64, bool)> = None;
    let mut consider = |seq: Vec<u32>, score: f64, truncated: bool| {
        let better = match &best {
            None => true,
            Some((s, b, _)) => score > *b || (score == *b && seq < *s),
        };
        if better {
            best = Some((seq, score, truncated));
        }
    };
    let body: Vec<u32> = (0..4).filter(|&t| t != eos).collect();
    let mut prefixes: Vec<Vec<u32>> = vec![vec![]];
    for len in 0..=3 {
        for p in &prefixes {
            if len < 3 {
                let full = with_eos(p);
                consider(full.clone(), m.sequence_log_prob(inputs, &full).unwrap(), false);
            } else {
                let logits = m.forward_logits(&inputs.with_target_prefix(&p[..2])).unwrap();
                let score = p
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| ctxbias::autodiff::kernels::log_softmax(logits.row(i))[t as usize])
                    .sum();
                consider(p.clone(), score, true);
            }
        }
        prefixes = prefixes
            .iter()
            .flat_map(|p| body.iter().map(move |&t| [p.as_slice(), &[t]].concat()))
            .collect();
    }
    best.unwrap()
}

#[test]
fn c04b_beam_search_matches_exhaustive_search() {
    let decode = DecodeConfig {
        beam: 64,
        max_len: 3,
        length_norm: false,
    };
    let mut matched = 0;
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let m = tiny_policy(seed);
        let mut r = rng::stream(seed, "tiny-inputs", 0);
        let k = r.gen_range(1..=3);
        let symbols: Vec<u32> = (0..k).map(|_| r.gen_range(0..2)).collect();
        let noise: Vec<Vec<f32>> = (0..k).map(|_| (0..4).map(|_| r.gen_range(-0.5..0.5)).collect()).collect();
        let inputs = PromptInputs {
            prompt: vec![0],
            context: (0..r.gen_range(0..3)).map(|_| r.gen_range(0..4)).collect(),
            audio: AudioInput::Features(m.featurize(&symbols, &noise).unwrap()),
            target_prefix: Vec::new(),
        };
        let hyp = beam_search(&GraphScorer::new(&m, &inputs), 1, &decode).unwrap();
        let (seq, score, truncated) = exhaustive_decode(&m, &inputs);
        worst = worst.max((hyp.score - score).abs());
        if hyp.full_sequence(1) == seq && hyp.truncated == truncated && (hyp.score - score).abs() <= 1e-9 {
            matched += 1;
        }
    }
    report(
        "4b",
        "beam 64 equals exhaustive search on |V|=4, length 3",
        matched == 100,
        format!("{matched}/100 models, max score diff {worst:.1e}"),
    );
}

fn wer_bits(r: &EvalReport) -> Vec<u64> {
    r.conditions.iter().map(|c| c.wer.to_bits()).collect()
}

#[test]
fn c05_gamma_zero_is_the_stage2_model() {
    let run = experiment();
    let (art, summary) = &run.seeds[0];
    let settings = EvalSettings {
        decode: run.cfg.decode.clone(),
        seed: rng::derive(art.seed, "eval", 0),
    };
    let test = &art.corpus.test;
    let predicted = [HistorySource::Predicted];
    let row = summary
        .gamma_sweep
        .iter()
        .find(|r| r.conditions[0].gamma == 0.0)
        .expect("γ = 0 row");
    let (alone, alone_dec) = evaluate_detailed(&art.sft, "test", test, run.cfg.n, &predicted, 0.0, &settings).unwrap();
    let (gated, gated_dec) = evaluate_detailed(&art.dpo, "test", test, run.cfg.n, &predicted, 0.0, &settings).unwrap();
    let mut perturbed = art.dpo.clone();
    randomize(&mut perturbed, |n| n.starts_with("lora.dpo."), 1.0, 77);
    let (_, perturbed_dec) = evaluate_detailed(&perturbed, "test", test, run.cfg.n, &predicted, 0.0, &settings).unwrap();
    let same_row = wer_bits(row) == wer_bits(&alone) && wer_bits(&gated) == wer_bits(&alone);
    let same_decodes = gated_dec == alone_dec && perturbed_dec == alone_dec;
    report(
        "5",
        "γ = 0 reproduces stage 2 and ignores the preference adapter",
        same_row && same_decodes,
        format!(
            "sweep row {} vs stage 2 {}; rows identical {same_row}, decodes identical {same_decodes}",
            row.conditions[0].wer, alone.conditions[0].wer
        ),
    );
}

fn group_bits(m: &PolicyModel, groups: &[ParamGroup]) -> Vec<(String, Vec<u32>)> {
    m.params()
        .iter()
        .filter(|(id, _, _)| groups.contains(&m.group(*id)))
        .map(|(_, n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn c06_freeze_contracts() {
    let run = experiment();
    let frozen3 = [ParamGroup::Encoder, ParamGroup::Backbone, ParamGroup::Projector, ParamGroup::Sft];
    let frozen1 = [ParamGroup::Encoder, ParamGroup::Backbone];
    let mut ok = 0;
    for (art, _) in &run.seeds {
        let dpo = group_bits(&art.dpo, &frozen3) == group_bits(&art.sft, &frozen3);
        let sft2 = group_bits(&art.sft2, &frozen3) == group_bits(&art.sft, &frozen3);
        let s1 = group_bits(&art.projector, &frozen1) == group_bits(&art.backbone, &frozen1);
        ok += usize::from(dpo && sft2 && s1);
    }
    report(
        "6",
        "frozen parameters are bit-identical",
        ok == run.seeds.len(),
        format!("{ok}/{} seeds", run.seeds.len()),
    );
}

#[test]
fn c07_context_dropout_statistics() {
    let window = ContextWindow {
        n: 2,
        entries: vec![vec![6, 7], vec![8]],
        source: HistorySource::Teacher,
    };
    let count = |p: f64| {
        let mut r = rng::stream(5, "dropout", 0);
        (0..10_000)
            .filter(|_| apply_context_dropout(window.clone(), p, &mut r).is_empty())
            .count()
    };
    let (half, none, all) = (count(0.5), count(0.0), count(1.0));
    let rate = half as f64 / 10_000.0;
    report(
        "7",
        "context dropout rate",
        (rate - 0.5).abs() <= 0.015 && none == 0 && all == 10_000,
        format!("p=0.5 empty fraction {rate:.4}; p=0 {none} empty; p=1 {all} empty"),
    );
}

fn wer_of(r: &EvalReport, source: HistorySource) -> f64 {
    r.conditions.iter().find(|c| c.source == source).expect("condition").wer
}

#[test]
fn c08_exposure_bias() {
    let run = experiment();
    let gaps: Vec<f64> = run
        .seeds
        .iter()
        .map(|(_, s)| wer_of(&s.oracle_model, HistorySource::Predicted) - wer_of(&s.oracle_model, HistorySource::Oracle))
        .collect();
    let wins = run
        .seeds
        .iter()
        .filter(|(_, s)| wer_of(&s.sft, HistorySource::Predicted) < wer_of(&s.oracle_model, HistorySource::Predicted))
        .count();
    for (art, s) in &run.seeds {
        println!(
            "    seed {}: oracle-trained oracle {:.2} predicted {:.2}; teacher+dropout predicted {:.2}",
            art.seed,
            wer_of(&s.oracle_model, HistorySource::Oracle),
            wer_of(&s.oracle_model, HistorySource::Predicted),
            wer_of(&s.sft, HistorySource::Predicted)
        );
    }
    report(
        "8",
        "exposure bias and its mitigation",
        mean(&gaps) > 0.0 && wins >= 4,
        format!("mean predicted-minus-oracle gap {:.2}; teacher+dropout better in {wins}/5", mean(&gaps)),
    );
}

#[test]
fn c09_preference_refinement_improves_stage2() {
    let run = experiment();
    let mut wins = 0;
    for (art, s) in &run.seeds {
        let (base, dpo, sft2) = (
            wer_of(&s.sft, HistorySource::Predicted),
            wer_of(&s.dpo, HistorySource::Predicted),
            wer_of(&s.sft2, HistorySource::Predicted),
        );
        println!(
            "    seed {}: stage 2 {base:.2}; preference γ={} {dpo:.2}; second supervised pass {sft2:.2}",
            art.seed, s.selected_gamma
        );
        wins += usize::from(dpo < base);
    }
    report("9", "preference refinement lowers predicted-history WER", wins >= 4, format!("{wins}/5 seeds"));
}

fn attack_gap(r: &EvalReport) -> f64 {
    r.gaps[0].gap
}

#[test]
fn c10_attack_robustness() {
    let run = experiment();
    let mut wins = 0;
    let (mut dpo_gaps, mut base_gaps) = (Vec::new(), Vec::new());
    for (art, s) in &run.seeds {
        let (a_dpo, a_base) = (wer_of(&s.dpo, HistorySource::Attack), wer_of(&s.sft, HistorySource::Attack));
        println!(
            "    seed {}: attacked stage 2 {a_base:.2} (gap {:.2}); attacked preference {a_dpo:.2} (gap {:.2})",
            art.seed,
            attack_gap(&s.sft),
            attack_gap(&s.dpo)
        );
        wins += usize::from(a_dpo < a_base);
        dpo_gaps.push(attack_gap(&s.dpo));
        base_gaps.push(attack_gap(&s.sft));
    }
    let (gd, gb) = (mean(&dpo_gaps), mean(&base_gaps));
    report(
        "10",
        "irrelevant-context attack",
        wins >= 4 && gd < gb,
        format!("attacked WER lower in {wins}/5; mean gap {gd:.2} vs {gb:.2}"),
    );
}

/// Mean over seeds of the first condition's WER, per γ of `grid`.
fn mean_curve(sweeps: &[&[EvalReport]], grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&g| {
            let per_seed: Vec<f64> = sweeps
                .iter()
                .map(|s| s.iter().find(|r| r.conditions[0].gamma == g).expect("grid value").conditions[0].wer)
                .collect();
            mean(&per_seed)
        })
        .collect()
}

#[test]
fn c11_gamma_sweep_shape() {
    let run = experiment();
    let grid = &run.cfg.gamma_grid;
    let sweeps: Vec<&[EvalReport]> = run.seeds.iter().map(|(_, s)| s.gamma_sweep.as_slice()).collect();
    let curve = mean_curve(&sweeps, grid);
    let zero = curve[0];
    let last = *curve.last().unwrap();
    let interior = curve[1..curve.len() - 1].iter().cloned().fold(f64::INFINITY, f64::min);
    let shown: Vec<String> = grid.iter().zip(&curve).map(|(g, w)| format!("{g}:{w:.2}")).collect();
    report(
        "11",
        "γ sweep improves then collapses",
        interior < zero && last >= 2.0 * zero,
        format!("mean WER {}; interior best {interior:.2}", shown.join(" ")),
    );
}

#[test]
fn c12_threshold_robustness() {
    let run = experiment();
    let grid = &run.cfg.gamma_grid;
    let mut all_ok = true;
    let mut lines = Vec::new();
    for (ti, &threshold) in run.cfg.thresholds.iter().enumerate() {
        let sweeps: Vec<&[EvalReport]> = run.seeds.iter().map(|(_, s)| s.thresholds[ti].reports.as_slice()).collect();
        if sweeps.iter().any(|s| s.is_empty()) {
            all_ok = false;
            lines.push(format!("{threshold}: no pairs"));
            continue;
        }
        let curve = mean_curve(&sweeps, grid);
        let best = curve[1..].iter().cloned().fold(f64::INFINITY, f64::min);
        all_ok &= best <= curve[0];
        lines.push(format!("{threshold}: best {best:.2} vs γ=0 {:.2}", curve[0]));
    }
    let mut monotone = true;
    for (art, s) in &run.seeds {
        let counts: Vec<usize> = s.thresholds.iter().map(|t| t.pairs).collect();
        println!("    seed {} pair counts {:?}", art.seed, counts);
        monotone &= counts.windows(2).all(|w| w[1] <= w[0]);
    }
    report(
        "12",
        "mining-threshold robustness",
        all_ok && monotone,
        format!("{}; pair counts monotone {monotone}", lines.join(", ")),
    );
}

#[test]
fn c13_reruns_are_byte_identical() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let pl = pipeline(dir.path(), 13);
            let e = write(dir.path(), "eval.toml", &eval_section("s3.ckpt", "[0.0, 0.5]"));
            ok(command("eval", &e, 13, &pl.path("report.jsonl")));
            (dir, pl)
        })
        .collect();
    let files = [
        "data/train.jsonl",
        "data/dev.jsonl",
        "data/test.jsonl",
        "data/ood.jsonl",
        "s0.ckpt",
        "s1.ckpt",
        "s2.ckpt",
        "s2.ckpt.log.jsonl",
        "pairs.jsonl",
        "s3.ckpt",
        "s3.ckpt.log.jsonl",
        "report.jsonl",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(runs[0].1.path(f)).unwrap() != std::fs::read(runs[1].1.path(f)).unwrap())
        .collect();
    report(
        "13",
        "reruns are byte-identical",
        differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", files.len()),
    );
}

fn slope(ys: &[f64]) -> f64 {
    let xm = (ys.len() - 1) as f64 / 2.0;
    let ym = mean(ys);
    let num: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
    let den: f64 = (0..ys.len()).map(|i| (i as f64 - xm).powi(2)).sum();
    num / den
}

#[test]
fn stage2_loss_trends_down() {
    let run = experiment();
    let slopes: Vec<f64> = run
        .seeds
        .iter()
        .map(|(art, _)| {
            let log = &art.logs.iter().find(|(name, _)| name == "sft").expect("stage 2 log").1;
            let losses: Vec<f64> = log.iter().take(200).map(|r| r.loss).collect();
            slope(&losses)
        })
        .collect();
    let shown: Vec<String> = slopes.iter().map(|s| format!("{s:.2e}")).collect();
    report(
        "stage 2",
        "training loss slope over the first 200 steps",
        slopes.iter().all(|&s| s < 0.0),
        format!("slopes {}", shown.join(" ")),
    );
}

#[test]
fn stage2_context_beats_no_context_on_dev() {
    let run = experiment();
    let mut wins = 0;
    let mut lines = Vec::new();
    for (art, _) in &run.seeds {
        let settings = EvalSettings {
            decode: run.cfg.decode.clone(),
            seed: rng::derive(art.seed, "eval", 0),
        };
        let predicted = [HistorySource::Predicted];
        let eval = |n| evaluate_detailed(&art.sft, "dev", &art.corpus.dev, n, &predicted, 0.0, &settings).unwrap().0;
        let (with, without) = (eval(run.cfg.n).conditions[0].wer, eval(0).conditions[0].wer);
        lines.push(format!("{with:.2} vs {without:.2}"));
        wins += usize::from(with < without);
    }
    report(
        "stage 2",
        "dev predicted-history WER below the N=0 baseline",
        wins >= 3,
        format!("{wins}/5 seeds ({})", lines.join(", ")),
    );
}
