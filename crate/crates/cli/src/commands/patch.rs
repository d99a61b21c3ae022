// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use ctxprobe::model::Segment;
use ctxprobe::patching::{aggregate_grids, estimate_sigma, run_patching, PatchRecord, PatchSpec, RestorationGrid};
use serde_json::json;

use super::{fmt_f, in_chunks, item_index, lookup, require_finite, select, target_texts, tokens_of, Ctx};
use crate::error::CliError;

/// Rebuild the flat grid from a record's `[position][layer]` rows.
fn grid_of(r: &PatchRecord) -> RestorationGrid {
    let flat = |rows: &[Vec<f64>]| rows.iter().flatten().copied().collect::<Vec<f64>>();
    RestorationGrid {
        mode: r.mode,
        n_positions: r.grid.len(),
        n_layers: r.grid.first().map_or(0, Vec::len),
        re_c: flat(&r.re_c),
        re_q: flat(&r.re_q),
        delta: flat(&r.grid),
        corrupted: r.corrupted,
        clean: r.clean,
    }
}

fn layout(segments: &[Segment]) -> String {
    segments.iter().map(|s| s.label.as_str()).collect::<Vec<_>>().join(" ")
}

pub fn patch(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg.section(&ctx.cfg.patching, "patching")?;
    let (reports, run_hash) = ctx.run_reports()?;
    let chosen = select(&reports, &cfg.selection)?;
    let relations = ctx.relations()?;
    let items = ctx.items(&relations)?;
    let index = item_index(&items);
    let model = ctx.model()?;
    let sigma = cfg.sigma_override.unwrap_or_else(|| estimate_sigma(&model));

    let out = ctx.open("patch", Some("patching"))?;
    let mut log = out.log::<PatchRecord>("records.jsonl")?;
    let todo: Vec<_> = chosen.into_iter().filter(|r| !log.is_done(&r.prompt_id)).collect();
    // cells of one prompt already run in parallel
    in_chunks(
        &todo,
        |chunk| {
            chunk
                .iter()
                .map(|r| {
                    let id = r.prompt_id.as_str();
                    let (c, q) = target_texts(r)?;
                    let spec = PatchSpec {
                        mode: cfg.mode,
                        sigma,
                        seed: cfg.seed,
                        c_tokens: tokens_of(&model, &c, id)?,
                        q_tokens: tokens_of(&model, &q, id)?,
                    };
                    let (_, prompt) = lookup(&index, id)?.prompts(&model).map_err(CliError::at(id))?;
                    let grid = run_patching(&model, &prompt, &spec, ctx.exec).map_err(CliError::at(id))?;
                    require_finite(id, grid.re_c.iter().chain(&grid.re_q).copied())?;
                    Ok(PatchRecord::new(id, &spec, &grid, &prompt.segments))
                })
                .collect()
        },
        |batch| log.append(batch),
    )?;
    let records = log.into_records();

    let mut cells = Vec::new();
    for r in &records {
        let mut tags = vec![String::new(); r.grid.len()];
        for (k, s) in r.segments.iter().enumerate() {
            for p in s.positions() {
                tags[p] = s.tag(k);
            }
        }
        for (pos, row) in r.grid.iter().enumerate() {
            for (layer, d) in row.iter().enumerate() {
                cells.push(vec![
                    r.prompt_id.clone(),
                    pos.to_string(),
                    tags[pos].clone(),
                    layer.to_string(),
                    fmt_f(r.re_c[pos][layer]),
                    fmt_f(r.re_q[pos][layer]),
                    fmt_f(*d),
                ]);
            }
        }
    }
    out.write_csv("cells.csv", &["prompt_id", "position", "segment", "layer", "re_c", "re_q", "delta"], &cells)?;

    // prompts pool only with prompts of the same segment layout
    let grids: Vec<RestorationGrid> = records.iter().map(grid_of).collect();
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(layout(&r.segments)).or_default().push(i);
    }
    let mut rows = Vec::new();
    for (key, members) in &groups {
        let pairs: Vec<(&RestorationGrid, &[Segment])> =
            members.iter().map(|&i| (&grids[i], records[i].segments.as_slice())).collect();
        let agg = aggregate_grids(&pairs)?;
        for (r, name) in agg.rows.iter().enumerate() {
            for layer in 0..agg.n_layers {
                rows.push(vec![
                    key.clone(),
                    members.len().to_string(),
                    name.clone(),
                    layer.to_string(),
                    fmt_f(agg.values[r * agg.n_layers + layer]),
                ]);
            }
        }
    }
    out.write_csv("segments.csv", &["layout", "n_prompts", "segment", "layer", "delta"], &rows)?;

    let mut m = ctx.manifest("patch", &out, model.id())?;
    m.inputs = json!({ "run": run_hash });
    m.n_records = records.len();
    m.files = ["records.jsonl", "cells.csv", "segments.csv"].map(String::from).to_vec();
    m.details = json!({ "mode": cfg.mode, "sigma": sigma, "layouts": groups.len() });
    out.write_manifest(&m)?;
    eprintln!("patch: {} prompts, sigma {sigma} -> {}", records.len(), out.dir.display());
    Ok(())
}
