// SPDX-License-Identifier: MIT OR Apache-2.0

use ctxprobe::knockout::{
    aggregate_table, attention_contribution, control_layer_sets, flip_counts, knockout_sweep, mean_series, select_knockout_layers,
    KnockoutRecord, KnockoutSpec, KnockoutTargets, SweepItem,
};
use ctxprobe::lens::TokenSet;
use ctxprobe::Intervention;
use serde_json::json;

use super::{fmt_f, fmt_opt, in_chunks, item_index, lookup, require_finite, select, target_texts, tokens_of, Ctx};
use crate::error::CliError;

pub fn knockout(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg.section(&ctx.cfg.knockout, "knockout")?;
    let (reports, run_hash) = ctx.run_reports()?;
    let chosen = select(&reports, &cfg.selection)?;
    let relations = ctx.relations()?;
    let items = ctx.items(&relations)?;
    let index = item_index(&items);
    let model = ctx.model()?;
    let v = model.config().vocab_size;

    let sweep_items: Vec<SweepItem> = chosen
        .iter()
        .map(|r| {
            let id = r.prompt_id.as_str();
            let (c, q) = target_texts(r)?;
            let (_, prompt) = lookup(&index, id)?.prompts(&model).map_err(CliError::at(id))?;
            Ok(SweepItem {
                prompt_id: r.prompt_id.clone(),
                prompt,
                targets: KnockoutTargets {
                    c_cand: r.c_cand.clone(),
                    q_cand: r.q_cand.clone(),
                    c_tokens: tokens_of(&model, &c, id)?,
                    q_tokens: tokens_of(&model, &q, id)?,
                },
            })
        })
        .collect::<Result<_, CliError>>()?;

    // per-layer attention output logit gap between the two answers
    let series = ctx.exec.try_map(&sweep_items, |it| -> Result<Vec<f64>, CliError> {
        let id = it.prompt_id.as_str();
        let trace = model
            .forward(&it.prompt.token_ids, &Intervention::none(), None)
            .map_err(CliError::at(id))?;
        let c = TokenSet::new("c", it.targets.c_tokens.clone(), v)?;
        let q = TokenSet::new("q", it.targets.q_tokens.clone(), v)?;
        let s = attention_contribution(&model, &trace, &c, &q);
        require_finite(id, s.iter().copied())?;
        Ok(s)
    })?;
    let mean = mean_series(&series)?;
    let (layers, spike) = match &cfg.layers {
        Some(l) => (l.clone(), None),
        None => {
            let (first, peak) = select_knockout_layers(&mean, cfg.theta)?;
            let mut l = vec![first, peak];
            l.dedup();
            (l, Some((first, peak)))
        }
    };
    let spec = KnockoutSpec { layers: layers.clone(), block: cfg.block };

    let out = ctx.open("knockout", Some("knockout"))?;
    let rows: Vec<Vec<String>> = mean.iter().enumerate().map(|(l, x)| vec![l.to_string(), fmt_f(*x)]).collect();
    out.write_csv("attention.csv", &["layer", "mean_contribution"], &rows)?;

    let mut log = out.log::<KnockoutRecord>("records.jsonl")?;
    let todo: Vec<SweepItem> = sweep_items.into_iter().filter(|it| !log.is_done(&it.prompt_id)).collect();
    in_chunks(
        &todo,
        |chunk| {
            let s = knockout_sweep(&model, chunk, &spec, cfg.n_controls, cfg.control_seed, ctx.exec)?;
            for r in &s.records {
                require_finite(&r.prompt_id, [r.main.c_after, r.main.q_after])?;
            }
            Ok(s.records)
        },
        |batch| log.append(batch),
    )?;
    let records = log.into_records();

    let table = aggregate_table(&records)?;
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|r| {
            vec![
                r.candidate.clone(),
                fmt_f(r.orig_prob),
                fmt_f(r.intervened_prob),
                fmt_f(r.delta),
                fmt_opt(r.control_prob),
                fmt_opt(r.control_delta),
            ]
        })
        .collect();
    out.write_csv(
        "table.csv",
        &["candidate", "orig_prob", "intervened_prob", "delta", "control_prob", "control_delta"],
        &rows,
    )?;
    let flips = flip_counts(&records);
    out.write_json("flips.json", &flips)?;

    let control_layers = control_layer_sets(model.n_layers(), &layers, cfg.n_controls, cfg.control_seed)?;
    let mut m = ctx.manifest("knockout", &out, model.id())?;
    m.inputs = json!({ "run": run_hash });
    m.n_records = records.len();
    m.files = ["attention.csv", "records.jsonl", "table.csv", "flips.json"].map(String::from).to_vec();
    m.details = json!({
        "layers": layers,
        "spike": spike.map(|(first, peak)| json!({ "first": first, "peak": peak })),
        "block": cfg.block,
        "control_layers": control_layers,
    });
    out.write_manifest(&m)?;
    eprintln!(
        "knockout: {} prompts at layers {layers:?}, {}/{} context-dominant flipped to query -> {}",
        records.len(),
        flips.flipped_to_query,
        flips.context_dominant,
        out.dir.display()
    );
    Ok(())
}
