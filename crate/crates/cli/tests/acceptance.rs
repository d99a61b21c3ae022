// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The desk-scale model is a synthetic 12-layer GPT-2-architecture
//! checkpoint trained on `data/desk.jsonl`, or a real Hugging Face GPT-2
//! directory when `CTXPROBE_GPT2_DIR` is set.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ctxprobe::behavior::{
    build_experiment, case_summary, delta_rate, load_relations, run_behavior, CandidateReport, Thresholds,
};
use ctxprobe::knockout::{
    apply_knockout, attention_contribution, mean_series, select_knockout_layers, Block, KnockoutSpec, KnockoutTargets,
};
use ctxprobe::lens::{load_class_lists, TokenSet};
use ctxprobe::model::{AttentionMask, Site};
use ctxprobe::patching::{estimate_sigma, full_restoration, run_patching, PatchMode, PatchSpec};
use ctxprobe::stats::{mean_pmi_and_ttest, one_sample_ttest, PmiExperiment};
use ctxprobe::synth::{build_synthetic_model_dir, corpus_texts, SynthSpec};
use ctxprobe::{Execution, Intervention, Model, TokenizedPrompt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use common::*;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(
        elapsed <= Duration::from_secs(limit_s),
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn prompts(model: &Model, corpus: &str, n: usize, seed: u64) -> Vec<TokenizedPrompt> {
    let rel = load_relations(data(corpus)).unwrap();
    let items = build_experiment(&rel, 1, 20, seed).unwrap();
    let step = (items.len() / n).max(1);
    items.iter().step_by(step).take(n).map(|it| it.prompts(model).unwrap().1).collect()
}

fn desk_model(scratch: &Path) -> Model {
    if let Some(dir) = std::env::var_os("CTXPROBE_GPT2_DIR") {
        return Model::load_dir(dir).unwrap();
    }
    let rel = load_relations(data("desk.jsonl")).unwrap();
    let words: Vec<String> = load_class_lists(data("class_tokens.json")).unwrap().into_values().flatten().collect();
    let dir = scratch.join("desk-gpt2-class");
    build_synthetic_model_dir(&dir, &corpus_texts(&rel, &words), &SynthSpec::gpt2_class()).unwrap();
    Model::load_dir(&dir).unwrap()
}

fn residual_identities() -> Outcome {
    let t = Instant::now();
    let fixture = repo_root().join("crates/core/tests/fixtures/toy");
    let model = Model::load_dir(&fixture).map_err(|e| e.to_string())?;
    let mut cells = 0;
    for p in prompts(&model, "mini.jsonl", 50, 101) {
        let tr = model.forward(&p.token_ids, &Intervention::none(), None).unwrap();
        for l in 0..tr.n_layers {
            for i in 0..tr.seq_len {
                let (r0, a, r1) = (tr.state(Site::R0, l, i), tr.state(Site::A, l, i), tr.state(Site::R1, l, i));
                let (m, r2) = (tr.state(Site::M, l, i), tr.state(Site::R2, l, i));
                for k in 0..tr.d_model {
                    ensure((a[k] + r0[k]).to_bits() == r1[k].to_bits(), format!("R1 != A + R0 at layer {l} token {i}"))?;
                    ensure((r1[k] + m[k]).to_bits() == r2[k].to_bits(), format!("R2 != R1 + M at layer {l} token {i}"))?;
                }
                cells += 1;
            }
        }
    }
    within(t.elapsed(), 60)?;
    Ok(format!("50 prompts, {cells} (token, layer) cells bitwise, {:.2}s", t.elapsed().as_secs_f64()))
}

fn final_layer_consistency(model: &Model) -> Outcome {
    let t = Instant::now();
    let mut worst = 0f64;
    for p in prompts(model, "desk.jsonl", 100, 102) {
        let tr = model.forward(&p.token_ids, &Intervention::none(), None).unwrap();
        let proj = model.project_to_vocab(tr.state(Site::R2, tr.n_layers - 1, tr.last_position()));
        for (a, b) in proj.iter().zip(&tr.final_logits) {
            let (a, b) = (*a as f64, *b as f64);
            if a != b {
                worst = worst.max((a - b).abs() / b.abs());
            }
        }
    }
    within(t.elapsed(), 300)?;
    ensure(worst <= 1e-4, format!("max relative error {worst:e}"))?;
    Ok(format!("100 prompts, max relative error {worst:e}, {:.1}s", t.elapsed().as_secs_f64()))
}

fn patching_null(model: &Model) -> Outcome {
    let t = Instant::now();
    let sigma = estimate_sigma(model);
    let mut worst = 0f64;
    for (n, p) in prompts(model, "desk.jsonl", 10, 103).into_iter().enumerate() {
        let spec = |mode, sigma| PatchSpec {
            mode,
            sigma,
            seed: n as u64,
            c_tokens: model.candidate_tokens("Paris"),
            q_tokens: model.candidate_tokens("English"),
        };
        for mode in [PatchMode::ContextPatching, PatchMode::QueryPatching] {
            let g = run_patching(model, &p, &spec(mode, 0.0), Execution::Parallel).map_err(|e| e.to_string())?;
            ensure(
                g.re_c.iter().chain(&g.re_q).all(|&v| v == 0.0),
                format!("prompt {n}: non-zero effect with zero noise"),
            )?;
            let s = spec(mode, sigma);
            let full = full_restoration(model, &p, &s).map_err(|e| e.to_string())?;
            let g = run_patching(model, &p, &s, Execution::Parallel).map_err(|e| e.to_string())?;
            worst = worst.max((full.c - g.clean.c).abs()).max((full.q - g.clean.q).abs());
        }
    }
    within(t.elapsed(), 600)?;
    ensure(worst <= 1e-4, format!("full restoration off by {worst:e}"))?;
    Ok(format!(
        "10 prompts x 2 modes all-zero at sigma 0; full restoration within {worst:e} at sigma {sigma}; {:.1}s",
        t.elapsed().as_secs_f64()
    ))
}

fn knockout_soundness(model: &Model) -> Outcome {
    let mut worst = 0f64;
    for (n, p) in prompts(model, "desk.jsonl", 20, 104).into_iter().enumerate() {
        let keys = p.context_positions();
        let last = p.last_position();
        let plain = model.forward(&p.token_ids, &Intervention::none(), None).unwrap();
        let empty = model.forward(&p.token_ids, &Intervention::knockout(vec![], last, keys.clone()), None).unwrap();
        ensure(
            empty.final_logits == plain.final_logits && empty.attn_probs == plain.attn_probs,
            format!("prompt {n}: empty mask changed the forward pass"),
        )?;
        let layers: Vec<usize> = (0..model.n_layers()).collect();
        let iv = Intervention {
            attention_mask: Some(AttentionMask { layers: layers.clone(), query_position: last, masked_keys: keys.clone() }),
            ..Default::default()
        };
        let ko = model.forward(&p.token_ids, &iv, None).unwrap();
        for &l in &layers {
            for h in 0..ko.n_heads {
                let row = ko.attn_row(l, h, last);
                ensure(keys.iter().all(|&k| row[k] == 0.0), format!("prompt {n} layer {l}: masked key has weight"))?;
                let sum: f64 = row.iter().map(|&w| w as f64).sum();
                worst = worst.max((sum - 1.0).abs());
                for q in 0..last {
                    ensure(
                        ko.attn_row(l, h, q) == plain.attn_row(l, h, q),
                        format!("prompt {n} layer {l}: row {q} changed"),
                    )?;
                }
            }
        }
    }
    ensure(worst <= 1e-6, format!("row sum off by {worst:e}"))?;
    Ok(format!("20 prompts x {} layers; row sums within {worst:e}", model.n_layers()))
}

struct Desk {
    reports: Vec<CandidateReport>,
    items: Vec<ctxprobe::behavior::ExperimentItem>,
    elapsed: Duration,
}

fn desk_run(model: &Model) -> Desk {
    let rel = load_relations(data("desk.jsonl")).unwrap();
    let items = build_experiment(&rel, 5, 20, 0).unwrap();
    let t = Instant::now();
    let reports = run_behavior(model, &items, Thresholds::default(), Execution::Parallel).unwrap();
    Desk { reports, items, elapsed: t.elapsed() }
}

fn candidate_algebra(desk: &Desk) -> Outcome {
    let r = &desk.reports;
    ensure(r.len() == 10 * 20 * 9 * 5, format!("{} rows", r.len()))?;
    for x in r {
        let mut union: Vec<&String> = x.c_cand.iter().chain(&x.q_cand).collect();
        let mut top: Vec<&String> = x.top_cq.iter().map(|c| &c.text).collect();
        union.sort();
        top.sort();
        ensure(union == top, format!("{}: partition does not cover top-3", x.prompt_id))?;
    }
    let total: f64 = case_summary(r).iter().map(|c| c.percent).sum();
    ensure((total - 100.0).abs() <= 0.1, format!("case percentages sum to {total}"))?;
    let rate = delta_rate(r).map_err(|e| e.to_string())?;
    let changed = r
        .iter()
        .filter(|x| x.top_cq.first().map(|c| &c.text) != x.top_q.first().map(|c| &c.text))
        .count();
    ensure((0.0..=1.0).contains(&rate), format!("delta rate {rate}"))?;
    ensure(rate == changed as f64 / r.len() as f64, format!("delta rate {rate} vs recount {changed}"))?;
    within(desk.elapsed, 1800)?;
    let cases: Vec<String> = case_summary(r).iter().map(|c| format!("{} {:.1}%", c.label, c.percent)).collect();
    Ok(format!("{} rows; {}; delta rate {rate:.4}; {:.0}s", r.len(), cases.join(", "), desk.elapsed.as_secs_f64()))
}

fn pmi_machinery() -> Outcome {
    let grid = |rows: &[&[(&str, usize)]]| -> Vec<Vec<String>> {
        rows.iter()
            .map(|r| r.iter().flat_map(|(a, n)| std::iter::repeat_n(a.to_string(), *n)).collect())
            .collect()
    };
    // 30 answers; marginals a1 10, a2 8, a3 12
    let answers = grid(&[&[("a1", 5), ("a2", 3), ("a3", 2)], &[("a1", 5), ("a2", 5)], &[("a3", 10)]]);
    let exp = PmiExperiment::new("hand", answers, vec![Some("a1".into()), Some("a2".into()), Some("a3".into())])
        .map_err(|e| e.to_string())?;
    for (i, want) in [(3.0f64 / 2.0).ln(), (15.0f64 / 8.0).ln(), (5.0f64 / 2.0).ln()].iter().enumerate() {
        let got = exp.pmi(i).unwrap();
        ensure((got - want).abs() <= 1e-9, format!("pair {i}: {got} vs {want}"))?;
    }

    // t/p against statrs; t from its textbook formula
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0f64;
    for n in [2usize, 3, 5, 10, 40, 200] {
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
        let r = one_sample_ttest(&xs).map_err(|e| e.to_string())?;
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let t = mean / (sd / (n as f64).sqrt());
        let p = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, (n - 1) as f64).unwrap().cdf(t.abs()));
        worst = worst.max((r.t_stat - t).abs()).max((r.p_value - p).abs());
    }
    ensure(worst <= 1e-6, format!("t/p differ from reference by {worst:e}"))?;

    // independence: answers shuffled across contexts
    let n_ctx = 10;
    let dependent: Vec<Vec<String>> = (0..n_ctx).map(|c| vec![format!("a{c}"); 100]).collect();
    let exp = PmiExperiment::new("dep", dependent, (0..n_ctx).map(|c| Some(format!("a{c}"))).collect()).unwrap();
    let mut passing = 0;
    for seed in 0..20 {
        let r = mean_pmi_and_ttest(&exp.shuffled(seed)).map_err(|e| e.to_string())?;
        if r.mean_pmi.abs() < 0.3 && r.p > 0.05 {
            passing += 1;
        }
    }
    ensure(passing >= 18, format!("{passing}/20 shuffles independent"))?;

    // upper bound over random grids
    let mut checked = 0;
    for _ in 0..500 {
        let n_c = rng.random_range(1..8);
        let n_q = rng.random_range(1..12);
        let answers: Vec<Vec<String>> = (0..n_c)
            .map(|_| (0..n_q).map(|_| format!("a{}", rng.random_range(0..5))).collect())
            .collect();
        let designated = answers.iter().map(|r| Some(r[rng.random_range(0..n_q)].clone())).collect();
        let exp = PmiExperiment::new("r", answers, designated).unwrap();
        for i in 0..exp.pairs.len() {
            if let Some(v) = exp.pmi(i) {
                ensure(v <= (n_c as f64).ln() + 1e-12, format!("PMI {v} above ln {n_c}"))?;
                checked += 1;
            }
        }
    }
    Ok(format!(
        "3x3 table exact; t/p within {worst:e} of reference; {passing}/20 shuffles independent; {checked} PMI values under ln n"
    ))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut snaps = Vec::new();
    for name in ["first", "second"] {
        let dir = tmp.path().join(name);
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = write_config(&dir, &mini_config(&dir.join("out")));
        for c in COMMANDS {
            let out = cli(&[c, "-c", cfg.to_str().unwrap()]);
            ensure(out.status.success(), format!("{c}: {}", String::from_utf8_lossy(&out.stderr)))?;
        }
        snaps.push(snapshot(&dir.join("out")));
    }
    let data_files = snaps[0]
        .iter()
        .filter(|(n, _)| n.ends_with(".jsonl") || n.ends_with(".csv"))
        .count();
    ensure(snaps[0].len() == snaps[1].len(), "different file sets")?;
    for ((a, x), (b, y)) in snaps[0].iter().zip(&snaps[1]) {
        ensure(a == b && x == y, format!("{a} differs"))?;
    }
    Ok(format!(
        "{} commands rerun; {} files identical ({data_files} JSONL/CSV)",
        COMMANDS.len(),
        snaps[0].len()
    ))
}

fn knockout_trend(model: &Model, desk: &Desk) -> Outcome {
    let dominant: Vec<&CandidateReport> = desk
        .reports
        .iter()
        .filter(|r| r.case.is_context_dominant() && !r.c_cand.is_empty() && !r.q_cand.is_empty())
        .collect();
    let any_dominant = desk.reports.iter().any(|r| r.case.is_context_dominant());
    ensure(any_dominant, "no context-dominant prompt: the model never prefers a context-based candidate")?;
    ensure(!dominant.is_empty(), "context-dominant prompts exist but none has a query-based candidate to track")?;
    let chosen: Vec<&CandidateReport> = dominant.iter().step_by((dominant.len() / 50).max(1)).take(50).copied().collect();
    let v = model.config().vocab_size;
    let index: std::collections::HashMap<&str, &ctxprobe::behavior::ExperimentItem> =
        desk.items.iter().map(|it| (it.id.as_str(), it)).collect();

    let mut cases = Vec::new();
    let mut series = Vec::new();
    for r in &chosen {
        let (_, prompt) = index[r.prompt_id.as_str()].prompts(model).unwrap();
        let targets = KnockoutTargets {
            c_cand: r.c_cand.clone(),
            q_cand: r.q_cand.clone(),
            c_tokens: model.candidate_tokens(&r.c_cand[0]),
            q_tokens: model.candidate_tokens(&r.q_cand[0]),
        };
        let tr = model.forward(&prompt.token_ids, &Intervention::none(), None).unwrap();
        let c = TokenSet::new("c", targets.c_tokens.clone(), v).unwrap();
        let q = TokenSet::new("q", targets.q_tokens.clone(), v).unwrap();
        series.push(attention_contribution(model, &tr, &c, &q));
        cases.push((prompt, targets));
    }
    let mean = mean_series(&series).unwrap();
    let (first, peak) = select_knockout_layers(&mean, 0.25)
        .map_err(|e| format!("{} context-dominant prompts; layer selection failed: {e}", chosen.len()))?;
    let mut layers = vec![first, peak];
    layers.dedup();
    let spec = KnockoutSpec { layers: layers.clone(), block: Block::ContextTokens };
    let (mut both, mut dc, mut dq) = (0, 0.0, 0.0);
    for (prompt, targets) in &cases {
        let k = apply_knockout(model, prompt, &spec, targets).unwrap();
        dc += (k.c_after - k.c_before) / cases.len() as f64;
        dq += (k.q_after - k.q_before) / cases.len() as f64;
        if k.c_after < k.c_before && k.q_after > k.q_before {
            both += 1;
        }
    }
    ensure(both > 0, format!("no prompt moved toward the query candidate at layers {layers:?}"))?;
    Ok(format!(
        "{} context-dominant rows; knockout at layers {layers:?} moves {both}/{} prompts toward the query answer; mean deltas c {dc:+.2} / q {dq:+.2} points",
        dominant.len(),
        cases.len()
    ))
}

fn main() {
    let scratch = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        println!(
            "criterion {n} [{name}]: {} - {}",
            if out.is_ok() { "PASS" } else { "FAIL" },
            out.as_ref().unwrap_or_else(|e| e)
        );
        results.push((n, name, out));
    };

    let model = desk_model(scratch.path());
    println!(
        "desk model `{}`: {} layers, d_model {}, vocab {}",
        model.id(),
        model.n_layers(),
        model.config().d_model,
        model.config().vocab_size
    );
    record(1, "residual identities", &mut residual_identities);
    record(2, "logit lens final layer", &mut || final_layer_consistency(&model));
    record(3, "patching null test", &mut || patching_null(&model));
    record(4, "knockout soundness", &mut || knockout_soundness(&model));
    let desk = desk_run(&model);
    record(5, "candidate-set algebra", &mut || candidate_algebra(&desk));
    record(6, "PMI machinery", &mut pmi_machinery);
    record(7, "determinism", &mut determinism);
    record(8, "knockout trend", &mut || knockout_trend(&model, &desk));

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria PASS", results.len());
    } else {
        println!("acceptance: FAIL on criteria {failed:?}");
        std::process::exit(1);
    }
}
