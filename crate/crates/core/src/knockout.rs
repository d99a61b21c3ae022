// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention knockout from the last token to the context or query tokens.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lens::{token_set_logit, TokenSet};
use crate::model::{ActivationTrace, Intervention, Model, TokenFilter, TokenizedPrompt};
use crate::patching::candidate_logprob;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    ContextTokens,
    QueryTokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnockoutSpec {
    /// 0-based layer indices.
    pub layers: Vec<usize>,
    pub block: Block,
}

/// Candidate sets of the unmodified C+Q run and the tokens of the two
/// tracked candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutTargets {
    pub c_cand: Vec<String>,
    pub q_cand: Vec<String>,
    pub c_tokens: Vec<TokenId>,
    pub q_tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Context,
    Query,
    Other,
}

impl KnockoutTargets {
    pub fn kind(&self, answer: &str) -> AnswerKind {
        if self.c_cand.iter().any(|c| c == answer) {
            AnswerKind::Context
        } else if self.q_cand.iter().any(|q| q == answer) {
            AnswerKind::Query
        } else {
            AnswerKind::Other
        }
    }
}

/// Probabilities in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutResult {
    pub layers: Vec<usize>,
    pub block: Block,
    pub c_before: f64,
    pub c_after: f64,
    pub q_before: f64,
    pub q_after: f64,
    pub top1_before: String,
    pub top1_after: String,
    pub kind_before: AnswerKind,
    pub kind_after: AnswerKind,
    pub flipped: bool,
}

fn percent(logits: &[f32], tokens: &[TokenId]) -> f64 {
    100.0 * candidate_logprob(logits, tokens).exp()
}

pub fn blocked_positions(prompt: &TokenizedPrompt, block: Block) -> Result<Vec<usize>> {
    let keys = match block {
        Block::ContextTokens => prompt.context_positions(),
        Block::QueryTokens => prompt.query_positions(),
    };
    if keys.is_empty() {
        return Err(Error::MissingSegment(format!("prompt has no tokens to block for {block:?}")));
    }
    Ok(keys)
}

pub fn apply_knockout(
    model: &Model,
    prompt: &TokenizedPrompt,
    spec: &KnockoutSpec,
    targets: &KnockoutTargets,
) -> Result<KnockoutResult> {
    if let Some(&l) = spec.layers.iter().find(|&&l| l >= model.n_layers()) {
        return Err(Error::OutOfRange(format!("layer {l} of {}", model.n_layers())));
    }
    let keys = blocked_positions(prompt, spec.block)?;
    let tokens = &prompt.token_ids;
    let before = model.forward_logits(tokens, &Intervention::none(), None)?;
    let after = if spec.layers.is_empty() {
        before.clone()
    } else {
        let iv = Intervention::knockout(spec.layers.clone(), prompt.last_position(), keys);
        model.forward_logits(tokens, &iv, None)?
    };
    let top1 = |logits: &[f32]| {
        model
            .top_k_restricted(logits, 1, TokenFilter::CapitalizedInitial)
            .into_iter()
            .next()
            .map(|c| c.text)
            .unwrap_or_default()
    };
    let (top1_before, top1_after) = (top1(&before), top1(&after));
    let kind_before = targets.kind(&top1_before);
    let kind_after = targets.kind(&top1_after);
    Ok(KnockoutResult {
        layers: spec.layers.clone(),
        block: spec.block,
        c_before: percent(&before, &targets.c_tokens),
        c_after: percent(&after, &targets.c_tokens),
        q_before: percent(&before, &targets.q_tokens),
        q_after: percent(&after, &targets.q_tokens),
        top1_before,
        top1_after,
        kind_before,
        kind_after,
        flipped: kind_before != kind_after,
    })
}

/// `(first, peak)` spike layers of a per-layer series (0-based).
///
/// `peak` is the argmax (earliest on ties). `first` is the earliest layer
/// reaching `theta * series[peak]`; when that is the peak itself, the
/// earliest strictly positive layer is used instead.
pub fn select_knockout_layers(series: &[f64], theta: f64) -> Result<(usize, usize)> {
    let mut peak = None;
    for (i, &v) in series.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::NonFinite("attention contribution series".into()));
        }
        if peak.is_none_or(|p: usize| v > series[p]) {
            peak = Some(i);
        }
    }
    let peak = peak.ok_or(Error::NoSpike)?;
    if series[peak] <= 0.0 {
        return Err(Error::NoSpike);
    }
    let cut = theta * series[peak];
    let mut first = series.iter().position(|&v| v >= cut).unwrap_or(peak);
    if first == peak {
        first = series.iter().position(|&v| v > 0.0).unwrap_or(peak);
    }
    Ok((first, peak))
}

/// Per-layer `logit(c) - logit(q)` of the attention output at the last token.
pub fn attention_contribution(model: &Model, trace: &ActivationTrace, c: &TokenSet, q: &TokenSet) -> Vec<f64> {
    let last = trace.last_position();
    (0..trace.n_layers)
        .map(|l| {
            let logits = model.project_to_vocab(trace.state(crate::model::Site::A, l, last));
            token_set_logit(&logits, c) as f64 - token_set_logit(&logits, q) as f64
        })
        .collect()
}

/// Mean of per-prompt series.
pub fn mean_series(series: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = series
        .first()
        .ok_or_else(|| Error::Invalid("mean of zero series".into()))?;
    let mut acc = vec![0.0; first.len()];
    for s in series {
        if s.len() != acc.len() {
            return Err(Error::Shape("series of different lengths".into()));
        }
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|a| a / series.len() as f64).collect())
}

/// Layer pairs for random controls: two layers per run from 1-based
/// `[2, L-1]`, excluding `critical`, one seeded draw per run.
pub fn control_layer_sets(
    n_layers: usize,
    critical: &[usize],
    n_runs: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let pool: Vec<usize> = (1..n_layers.saturating_sub(1))
        .filter(|l| !critical.contains(l))
        .collect();
    if n_runs > 0 && pool.len() < 2 {
        return Err(Error::Config(format!(
            "{n_layers} layers leave {} candidates for random controls",
            pool.len()
        )));
    }
    Ok((0..n_runs as u64)
        .map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(run));
            let mut pick: Vec<usize> = sample(&mut rng, pool.len(), 2).into_iter().map(|i| pool[i]).collect();
            pick.sort_unstable();
            pick
        })
        .collect())
}

/// One prompt of a sweep.
#[derive(Debug, Clone)]
pub struct SweepItem {
    pub prompt_id: String,
    pub prompt: TokenizedPrompt,
    pub targets: KnockoutTargets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutRecord {
    pub prompt_id: String,
    pub main: KnockoutResult,
    pub controls: Vec<KnockoutResult>,
    /// Mean over control runs; `None` without controls.
    pub c_control: Option<f64>,
    pub q_control: Option<f64>,
}

/// Row of the aggregate table, one per candidate kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutTableRow {
    pub candidate: String,
    pub orig_prob: f64,
    pub intervened_prob: f64,
    pub delta: f64,
    pub control_prob: Option<f64>,
    pub control_delta: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipCounts {
    /// Rows whose original top-1 was a context-based candidate.
    pub context_dominant: usize,
    pub flipped_to_query: usize,
    pub remained_context: usize,
    pub other: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutSweep {
    pub layers: Vec<usize>,
    pub control_layers: Vec<Vec<usize>>,
    pub records: Vec<KnockoutRecord>,
    pub table: Vec<KnockoutTableRow>,
    pub flips: FlipCounts,
}

pub fn knockout_sweep(
    model: &Model,
    items: &[SweepItem],
    spec: &KnockoutSpec,
    n_controls: usize,
    control_seed: u64,
    exec: Execution,
) -> Result<KnockoutSweep> {
    let control_layers = control_layer_sets(model.n_layers(), &spec.layers, n_controls, control_seed)?;
    let records = exec.try_map(items, |it| -> Result<KnockoutRecord> {
        let main = apply_knockout(model, &it.prompt, spec, &it.targets)?;
        let controls = control_layers
            .iter()
            .map(|layers| {
                let s = KnockoutSpec { layers: layers.clone(), block: spec.block };
                apply_knockout(model, &it.prompt, &s, &it.targets)
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = |f: fn(&KnockoutResult) -> f64| {
            (!controls.is_empty()).then(|| controls.iter().map(f).sum::<f64>() / controls.len() as f64)
        };
        Ok(KnockoutRecord {
            prompt_id: it.prompt_id.clone(),
            c_control: mean(|r| r.c_after),
            q_control: mean(|r| r.q_after),
            main,
            controls,
        })
    })?;
    Ok(KnockoutSweep {
        layers: spec.layers.clone(),
        control_layers,
        table: aggregate_table(&records)?,
        flips: flip_counts(&records),
        records,
    })
}

pub fn aggregate_table(records: &[KnockoutRecord]) -> Result<Vec<KnockoutTableRow>> {
    if records.is_empty() {
        return Err(Error::Invalid("knockout table of zero rows".into()));
    }
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&KnockoutRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let has_controls = records.iter().all(|r| r.c_control.is_some());
    let row = |name: &str, before: &dyn Fn(&KnockoutRecord) -> f64, after: &dyn Fn(&KnockoutRecord) -> f64, ctl: &dyn Fn(&KnockoutRecord) -> Option<f64>| {
        let orig = mean(before);
        let intervened = mean(after);
        let control = has_controls.then(|| mean(&|r| ctl(r).unwrap_or(0.0)));
        KnockoutTableRow {
            candidate: name.to_string(),
            orig_prob: orig,
            intervened_prob: intervened,
            delta: intervened - orig,
            control_prob: control,
            control_delta: control.map(|c| c - orig),
        }
    };
    Ok(vec![
        row("c_cand", &|r| r.main.c_before, &|r| r.main.c_after, &|r| r.c_control),
        row("q_cand", &|r| r.main.q_before, &|r| r.main.q_after, &|r| r.q_control),
    ])
}

pub fn flip_counts(records: &[KnockoutRecord]) -> FlipCounts {
    let mut f = FlipCounts::default();
    for r in records.iter().filter(|r| r.main.kind_before == AnswerKind::Context) {
        f.context_dominant += 1;
        match r.main.kind_after {
            AnswerKind::Query => f.flipped_to_query += 1,
            AnswerKind::Context => f.remained_context += 1,
            AnswerKind::Other => f.other += 1,
        }
    }
    f
}
