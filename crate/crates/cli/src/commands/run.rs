// SPDX-License-Identifier: MIT OR Apache-2.0

use ctxprobe::behavior::{accuracy, case_summary, delta_rate, run_behavior, CandidateReport, ExperimentItem};
use serde_json::json;

use super::{fmt_f, in_chunks, require_finite, Ctx};
use crate::error::CliError;

pub fn run(ctx: &Ctx) -> Result<(), CliError> {
    let relations = ctx.relations()?;
    let items = ctx.items(&relations)?;
    let model = ctx.model()?;
    let out = ctx.open("run", None)?;
    let mut log = out.log::<CandidateReport>("reports.jsonl")?;
    let todo: Vec<ExperimentItem> = items.iter().filter(|it| !log.is_done(&it.id)).cloned().collect();
    in_chunks(
        &todo,
        |chunk| {
            let reports = run_behavior(&model, chunk, ctx.cfg.thresholds, ctx.exec)?;
            for r in &reports {
                require_finite(
                    &r.prompt_id,
                    r.top_cq.iter().chain(&r.top_q).map(|c| c.logit as f64),
                )?;
            }
            Ok(reports)
        },
        |batch| log.append(batch),
    )?;
    let reports = log.into_records();

    let cases = case_summary(&reports);
    let rows: Vec<Vec<String>> = cases
        .iter()
        .map(|c| vec![c.case.to_string(), c.label.clone(), c.count.to_string(), fmt_f(c.percent)])
        .collect();
    out.write_csv("summary.csv", &["case", "label", "count", "percent"], &rows)?;
    let copied = reports.iter().filter(|r| r.copied).count();
    out.write_json(
        "summary.json",
        &json!({
            "n_rows": reports.len(),
            "cases": cases,
            "delta_rate": delta_rate(&reports)?,
            "accuracy": accuracy(&reports)?,
            "copied": copied,
            "thresholds": ctx.cfg.thresholds,
        }),
    )?;

    let mut m = ctx.manifest("run", &out, model.id())?;
    m.n_records = reports.len();
    m.files = vec!["reports.jsonl".into(), "summary.csv".into(), "summary.json".into()];
    out.write_manifest(&m)?;
    eprintln!("run: {} rows -> {}", reports.len(), out.dir.display());
    Ok(())
}
