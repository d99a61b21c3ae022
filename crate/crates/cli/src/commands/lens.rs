// SPDX-License-Identifier: MIT OR Apache-2.0

use ctxprobe::lens::{
    class_token_sets, load_class_lists, logit_lens_table, mean_trajectory, trajectory, LensRow, LogitTrajectory,
    TokenSet,
};
use ctxprobe::Intervention;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{fmt_f, in_chunks, item_index, lookup, require_finite, select, target_texts, tokens_of, Ctx};
use crate::error::CliError;
use crate::output::Keyed;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LensRecord {
    pub prompt_id: String,
    pub context_candidate: String,
    pub query_candidate: String,
    pub trajectory: LogitTrajectory,
    pub top: Vec<LensRow>,
}

impl Keyed for LensRecord {
    fn key(&self) -> &str {
        &self.prompt_id
    }
}

pub fn lens(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg.section(&ctx.cfg.lens, "lens")?;
    let (reports, run_hash) = ctx.run_reports()?;
    let chosen = select(&reports, &cfg.selection)?;
    let relations = ctx.relations()?;
    let items = ctx.items(&relations)?;
    let index = item_index(&items);
    let model = ctx.model()?;
    let classes = class_token_sets(&model, &load_class_lists(&ctx.cfg.class_lists)?)?;
    let v = model.config().vocab_size;

    let out = ctx.open("lens", Some("lens"))?;
    let mut log = out.log::<LensRecord>("records.jsonl")?;
    let todo: Vec<_> = chosen.into_iter().filter(|r| !log.is_done(&r.prompt_id)).collect();
    in_chunks(
        &todo,
        |chunk| {
            ctx.exec.try_map(chunk, |r| {
                let id = r.prompt_id.as_str();
                let (c, q) = target_texts(r)?;
                let mut sets = classes.clone();
                sets.push(TokenSet::new("context_candidate", tokens_of(&model, &c, id)?, v)?);
                sets.push(TokenSet::new("query_candidate", tokens_of(&model, &q, id)?, v)?);
                let (_, prompt) = lookup(&index, id)?.prompts(&model).map_err(CliError::at(id))?;
                let trace = model
                    .forward(&prompt.token_ids, &Intervention::none(), None)
                    .map_err(CliError::at(id))?;
                let traj = trajectory(&model, &trace, &sets);
                require_finite(id, traj.values.iter().map(|&x| x as f64))?;
                Ok(LensRecord {
                    prompt_id: id.to_string(),
                    context_candidate: c,
                    query_candidate: q,
                    trajectory: traj,
                    top: logit_lens_table(&model, &trace, cfg.top_k).map_err(CliError::at(id))?,
                })
            })
        },
        |batch| log.append(batch),
    )?;
    let records = log.into_records();

    let mut rows = Vec::new();
    for rec in &records {
        for t in rec.trajectory.rows(&rec.prompt_id) {
            rows.push(vec![t.prompt_id, t.layer.to_string(), t.site.as_str().into(), t.set, fmt_f(t.logit as f64)]);
        }
    }
    out.write_csv("trajectory.csv", &["prompt_id", "layer", "site", "set", "logit"], &rows)?;

    let trajs: Vec<LogitTrajectory> = records.iter().map(|r| r.trajectory.clone()).collect();
    let mean = mean_trajectory(&trajs)?;
    let rows: Vec<Vec<String>> = mean
        .rows("")
        .into_iter()
        .map(|t| vec![t.layer.to_string(), t.site.as_str().into(), t.set, fmt_f(t.logit as f64)])
        .collect();
    out.write_csv("mean_trajectory.csv", &["layer", "site", "set", "logit"], &rows)?;

    let mut rows = Vec::new();
    for rec in &records {
        for t in &rec.top {
            rows.push(vec![
                rec.prompt_id.clone(),
                t.layer.to_string(),
                t.site.as_str().into(),
                t.rank.to_string(),
                t.token_id.to_string(),
                t.token.clone(),
                fmt_f(t.prob as f64),
            ]);
        }
    }
    out.write_csv("top_tokens.csv", &["prompt_id", "layer", "site", "rank", "token_id", "token", "prob"], &rows)?;

    let mut m = ctx.manifest("lens", &out, model.id())?;
    m.inputs = json!({ "run": run_hash });
    m.n_records = records.len();
    m.files = ["records.jsonl", "trajectory.csv", "mean_trajectory.csv", "top_tokens.csv"]
        .map(String::from)
        .to_vec();
    out.write_manifest(&m)?;
    eprintln!("lens: {} prompts -> {}", records.len(), out.dir.display());
    Ok(())
}
