// SPDX-License-Identifier: MIT OR Apache-2.0

use ctxprobe::behavior::export_annotation_sample;
use serde_json::json;

use super::Ctx;
use crate::error::CliError;

pub fn export_annotations(ctx: &Ctx) -> Result<(), CliError> {
    let a = ctx.cfg.section(&ctx.cfg.annotations, "annotations")?;
    let (reports, run_hash) = ctx.run_reports()?;
    let rows = export_annotation_sample(&reports, a.n, a.seed)?;
    let out = ctx.open("annotations", Some("annotations"))?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.prompt_id.clone(),
                r.prompt.clone(),
                r.candidates.join("|"),
                r.candidate.clone(),
                String::new(),
                String::new(),
                String::new(),
            ]
        })
        .collect();
    out.write_csv(
        "annotations.csv",
        &[
            "prompt_id",
            "prompt",
            "candidates",
            "candidate",
            "context_influenced",
            "correct_class",
            "satisfies_both",
        ],
        &table,
    )?;
    let model_id = reports.first().map(|r| r.model_id.clone()).unwrap_or_default();
    let mut m = ctx.manifest("annotations", &out, &model_id)?;
    m.inputs = json!({ "run": run_hash });
    m.n_records = rows.len();
    m.files = vec!["annotations.csv".into()];
    out.write_manifest(&m)?;
    eprintln!("export-annotations: {} rows -> {}", rows.len(), out.dir.display());
    Ok(())
}
