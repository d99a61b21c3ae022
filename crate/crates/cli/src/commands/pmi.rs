// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use ctxprobe::behavior::{build_pmi_items, run_behavior, CtxType, ExperimentItem};
use ctxprobe::stats::{build_pmi_experiment, mean_pmi_and_ttest, DesignatedRule, GridAnswer, PmiReport};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{fmt_f, fmt_opt, in_chunks, Ctx};
use crate::config::sha256_hex;
use crate::error::CliError;
use crate::output::{Keyed, OutputDir};

/// One C+Q answer of the context-by-query grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PmiRow {
    pub prompt_id: String,
    pub class: String,
    pub context: usize,
    pub query: usize,
    pub answer: String,
    pub c_cand: Vec<String>,
}

impl Keyed for PmiRow {
    fn key(&self) -> &str {
        &self.prompt_id
    }
}

/// A precomputed answer grid for one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassGrid {
    pub class: String,
    /// `[context][query]`.
    pub grid: Vec<Vec<GridAnswer>>,
}

pub fn pmi(ctx: &Ctx, answers: Option<&Path>) -> Result<(), CliError> {
    let cfg = ctx.cfg.section(&ctx.cfg.pmi, "pmi")?;
    match answers {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let grids: Vec<ClassGrid> = serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let hash = sha256_hex(format!("{}:{}", ctx.cfg.hash(Some("pmi")), sha256_hex(&bytes)).as_bytes());
            let out = OutputDir::open(&ctx.cfg.output, "pmi", &hash, ctx.overwrite)?;
            let n: usize = grids.iter().map(|g| g.grid.iter().map(Vec::len).sum::<usize>()).sum();
            let reports = report(&out, &grids, cfg.rule)?;
            let mut m = ctx.manifest("pmi", &out, "")?;
            m.inputs = json!({ "answers": sha256_hex(&bytes) });
            m.n_records = n;
            m.files = vec!["pmi.json".into(), "pmi.csv".into(), "pairs.csv".into()];
            out.write_manifest(&m)?;
            summary(&reports);
            Ok(())
        }
        None => from_model(ctx, cfg.classes.clone(), cfg.n_contexts, cfg.n_queries, cfg.seed, cfg.rule),
    }
}

fn from_model(
    ctx: &Ctx,
    classes: Vec<CtxType>,
    n_contexts: usize,
    n_queries: usize,
    seed: u64,
    rule: DesignatedRule,
) -> Result<(), CliError> {
    let relations = ctx.relations()?;
    let classes = if classes.is_empty() {
        CtxType::ALL
            .into_iter()
            .filter(|c| relations.iter().any(|r| r.ctx_type == *c))
            .collect()
    } else {
        classes
    };
    let mut cells: Vec<(String, usize, usize, ExperimentItem)> = Vec::new();
    for &class in &classes {
        let grid = build_pmi_items(&relations, class, n_contexts, n_queries, seed)?;
        for (c, row) in grid.into_iter().enumerate() {
            for (q, it) in row.into_iter().enumerate() {
                cells.push((class.as_str().to_string(), c, q, it));
            }
        }
    }
    let model = ctx.model()?;
    let out = ctx.open("pmi", Some("pmi"))?;
    let mut log = out.log::<PmiRow>("answers.jsonl")?;
    let todo: Vec<_> = cells.iter().filter(|c| !log.is_done(&c.3.id)).cloned().collect();
    in_chunks(
        &todo,
        |chunk| {
            let items: Vec<ExperimentItem> = chunk.iter().map(|c| c.3.clone()).collect();
            let reports = run_behavior(&model, &items, ctx.cfg.thresholds, ctx.exec)?;
            Ok(chunk
                .iter()
                .zip(reports)
                .map(|((class, c, q, it), r)| PmiRow {
                    prompt_id: it.id.clone(),
                    class: class.clone(),
                    context: *c,
                    query: *q,
                    answer: r.a_cq,
                    c_cand: r.c_cand,
                })
                .collect())
        },
        |batch| log.append(batch),
    )?;
    let rows = log.into_records();

    let grids: Vec<ClassGrid> = classes
        .iter()
        .map(|class| {
            let mut grid = vec![Vec::with_capacity(n_queries); n_contexts];
            for r in rows.iter().filter(|r| r.class == class.as_str()) {
                grid[r.context].push(GridAnswer { answer: r.answer.clone(), c_cand: r.c_cand.clone() });
            }
            ClassGrid { class: class.as_str().to_string(), grid }
        })
        .collect();
    let reports = report(&out, &grids, rule)?;
    let mut m = ctx.manifest("pmi", &out, model.id())?;
    m.n_records = rows.len();
    m.files = ["answers.jsonl", "pmi.json", "pmi.csv", "pairs.csv"].map(String::from).to_vec();
    out.write_manifest(&m)?;
    summary(&reports);
    Ok(())
}

fn report(out: &OutputDir, grids: &[ClassGrid], rule: DesignatedRule) -> Result<Vec<PmiReport>, CliError> {
    let mut reports = Vec::new();
    let mut pairs = Vec::new();
    for g in grids {
        let (exp, _) = build_pmi_experiment(g.class.clone(), &g.grid, rule)?;
        for (i, (c, cand)) in exp.pairs.iter().enumerate() {
            pairs.push(vec![g.class.clone(), c.to_string(), cand.clone(), fmt_opt(exp.pmi(i))]);
        }
        reports.push(mean_pmi_and_ttest(&exp).map_err(|e| CliError::Data(format!("class {}: {e}", g.class)))?);
    }
    out.write_json("pmi.json", &reports)?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.class.clone(),
                r.n_pairs.to_string(),
                fmt_f(r.mean_pmi),
                fmt_opt(r.t),
                fmt_f(r.p),
                r.excluded_pairs.to_string(),
                r.degenerate.to_string(),
            ]
        })
        .collect();
    out.write_csv("pmi.csv", &["class", "n_pairs", "mean_pmi", "t", "p", "excluded_pairs", "degenerate"], &rows)?;
    out.write_csv("pairs.csv", &["class", "context", "candidate", "pmi"], &pairs)?;
    Ok(reports)
}

fn summary(reports: &[PmiReport]) {
    for r in reports {
        eprintln!(
            "pmi: {} mean {:.4} t {} p {:.4} ({} pairs, {} excluded)",
            r.class,
            r.mean_pmi,
            fmt_opt(r.t),
            r.p,
            r.n_pairs,
            r.excluded_pairs
        );
    }
}
