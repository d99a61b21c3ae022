// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal tracing with embedding noise and single-state restoration.
//!
//! Three kinds of pass share one prompt:
//!
//! 1. clean, recorded in full;
//! 2. corrupted, with seeded Gaussian noise added to the token embeddings
//!    of the patched segments;
//! 3. one restoration pass per `(position, layer)` cell: the corrupted pass
//!    with that cell's `R2` overwritten by the clean value.
//!
//! The restoration effect of a cell toward candidate `t` is
//! `log p(t | restored) - log p(t | corrupted)` over the full vocabulary.
//! The same noise sample is used by the corrupted pass and every
//! restoration pass. A restoration pass resumes from the corrupted trace at
//! the restored layer instead of recomputing the layers below it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Intervention, Model, RestoreCell, Segment, SegmentLabel, Site, TokenizedPrompt};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// Noise on the context subject and object.
    ContextPatching,
    /// Noise on the query subject.
    QueryPatching,
}

impl PatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PatchMode::ContextPatching => "context_patching",
            PatchMode::QueryPatching => "query_patching",
        }
    }

    pub fn noised_segments(self) -> &'static [SegmentLabel] {
        match self {
            PatchMode::ContextPatching => &[SegmentLabel::ContextSubject, SegmentLabel::ContextObject],
            PatchMode::QueryPatching => &[SegmentLabel::QuerySubject],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub mode: PatchMode,
    pub sigma: f32,
    pub seed: u64,
    /// Sub-tokens of the context-based target candidate.
    pub c_tokens: Vec<TokenId>,
    /// Sub-tokens of the query-based target candidate.
    pub q_tokens: Vec<TokenId>,
}

impl PatchSpec {
    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("noise scale {} must be finite and >= 0", self.sigma)));
        }
        if self.c_tokens.is_empty() || self.q_tokens.is_empty() {
            return Err(Error::Config("both target candidates need at least one token".into()));
        }
        Ok(())
    }
}

/// Three times the population standard deviation of all token-embedding entries.
pub fn estimate_sigma(model: &Model) -> f32 {
    let data = model.token_embeddings().data();
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (3.0 * var.sqrt()) as f32
}

/// `max_t log softmax(logits)[t]`, computed in f64.
pub fn candidate_logprob(logits: &[f32], tokens: &[TokenId]) -> f64 {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = m + logits.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
    tokens
        .iter()
        .map(|&t| logits[t as usize] as f64 - lse)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProbPair {
    pub c: f64,
    pub q: f64,
}

impl LogProbPair {
    fn of(logits: &[f32], spec: &PatchSpec) -> Self {
        Self {
            c: candidate_logprob(logits, &spec.c_tokens),
            q: candidate_logprob(logits, &spec.q_tokens),
        }
    }
}

/// `[position][layer]` restoration effects of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationGrid {
    pub mode: PatchMode,
    pub n_positions: usize,
    pub n_layers: usize,
    pub re_c: Vec<f64>,
    pub re_q: Vec<f64>,
    /// `re_c - re_q` for context patching, `re_q - re_c` for query patching.
    pub delta: Vec<f64>,
    pub corrupted: LogProbPair,
    pub clean: LogProbPair,
}

impl RestorationGrid {
    pub fn at(&self, position: usize, layer: usize) -> usize {
        position * self.n_layers + layer
    }

    fn rows(&self, v: &[f64]) -> Vec<Vec<f64>> {
        v.chunks(self.n_layers).map(|r| r.to_vec()).collect()
    }
}

pub fn noise_positions(prompt: &TokenizedPrompt, mode: PatchMode) -> Result<Vec<usize>> {
    for &label in mode.noised_segments() {
        if !prompt.has_segment(label) {
            return Err(Error::MissingSegment(format!(
                "{} needs a {} segment",
                mode.as_str(),
                label.as_str()
            )));
        }
    }
    Ok(prompt.positions_of(mode.noised_segments()))
}

pub fn run_patching(
    model: &Model,
    prompt: &TokenizedPrompt,
    spec: &PatchSpec,
    exec: Execution,
) -> Result<RestorationGrid> {
    spec.validate()?;
    let noised = noise_positions(prompt, spec.mode)?;
    let tokens = &prompt.token_ids;
    let clean = model.forward(tokens, &Intervention::none(), None)?;
    let corrupted = model.forward(tokens, &Intervention::noise(noised, spec.sigma, spec.seed), None)?;
    let clean_lp = LogProbPair::of(&clean.final_logits, spec);
    let corrupted_lp = LogProbPair::of(&corrupted.final_logits, spec);

    let t = prompt.len();
    let l = model.n_layers();
    let d = model.config().d_model;
    let cells: Vec<(usize, usize)> = (0..t).flat_map(|i| (0..l).map(move |j| (i, j))).collect();
    let restored = exec.try_map(&cells, |&(i, layer)| -> Result<LogProbPair> {
        let mut residual = corrupted.layer_output(layer).to_vec();
        residual[i * d..(i + 1) * d].copy_from_slice(clean.state(Site::R2, layer, i));
        let logits = model.resume_logits(layer, residual)?;
        Ok(LogProbPair::of(&logits, spec))
    })?;

    let re_c: Vec<f64> = restored.iter().map(|r| r.c - corrupted_lp.c).collect();
    let re_q: Vec<f64> = restored.iter().map(|r| r.q - corrupted_lp.q).collect();
    let delta = re_c
        .iter()
        .zip(&re_q)
        .map(|(c, q)| match spec.mode {
            PatchMode::ContextPatching => c - q,
            PatchMode::QueryPatching => q - c,
        })
        .collect();
    Ok(RestorationGrid {
        mode: spec.mode,
        n_positions: t,
        n_layers: l,
        re_c,
        re_q,
        delta,
        corrupted: corrupted_lp,
        clean: clean_lp,
    })
}

/// Log-probabilities of the corrupted pass with every clean state restored at once.
pub fn full_restoration(model: &Model, prompt: &TokenizedPrompt, spec: &PatchSpec) -> Result<LogProbPair> {
    spec.validate()?;
    let tokens = &prompt.token_ids;
    let clean = model.forward(tokens, &Intervention::none(), None)?;
    let mut iv = Intervention::noise(noise_positions(prompt, spec.mode)?, spec.sigma, spec.seed);
    iv.restore = (0..prompt.len())
        .flat_map(|position| (0..model.n_layers()).map(move |layer| RestoreCell { position, layer }))
        .collect();
    let logits = model.forward_logits(tokens, &iv, Some(&clean))?;
    Ok(LogProbPair::of(&logits, spec))
}

/// JSONL record of one prompt's grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub prompt_id: String,
    pub mode: PatchMode,
    pub sigma: f32,
    pub seed: u64,
    pub grid: Vec<Vec<f64>>,
    pub re_c: Vec<Vec<f64>>,
    pub re_q: Vec<Vec<f64>>,
    pub corrupted: LogProbPair,
    pub clean: LogProbPair,
    pub segments: Vec<Segment>,
}

impl PatchRecord {
    pub fn new(prompt_id: impl Into<String>, spec: &PatchSpec, grid: &RestorationGrid, segments: &[Segment]) -> Self {
        Self {
            prompt_id: prompt_id.into(),
            mode: spec.mode,
            sigma: spec.sigma,
            seed: spec.seed,
            grid: grid.rows(&grid.delta),
            re_c: grid.rows(&grid.re_c),
            re_q: grid.rows(&grid.re_q),
            corrupted: grid.corrupted,
            clean: grid.clean,
            segments: segments.to_vec(),
        }
    }
}

/// Mean delta per segment (rows, in prompt order) and layer (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentGrid {
    /// Segment labels; a label that occurs more than once gets a 1-based suffix.
    pub rows: Vec<String>,
    pub n_layers: usize,
    /// `[row][layer]`.
    pub values: Vec<f64>,
}

fn row_names(labels: &[SegmentLabel]) -> Vec<String> {
    let mut total: BTreeMap<SegmentLabel, usize> = BTreeMap::new();
    for &l in labels {
        *total.entry(l).or_default() += 1;
    }
    let mut seen: BTreeMap<SegmentLabel, usize> = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let k = seen.entry(l).or_default();
            *k += 1;
            if total[&l] > 1 {
                format!("{}_{}", l.as_str(), k)
            } else {
                l.as_str().to_string()
            }
        })
        .collect()
}

/// Average each segment's positions within a prompt, then average the
/// per-prompt segment means across prompts.
pub fn aggregate_grids(grids: &[(&RestorationGrid, &[Segment])]) -> Result<SegmentGrid> {
    let (first, first_segs) = grids
        .first()
        .ok_or_else(|| Error::Invalid("no grids to aggregate".into()))?;
    let labels: Vec<SegmentLabel> = first_segs.iter().map(|s| s.label).collect();
    let n_layers = first.n_layers;
    let mut acc = vec![0f64; labels.len() * n_layers];
    for (grid, segs) in grids {
        let these: Vec<SegmentLabel> = segs.iter().map(|s| s.label).collect();
        if these != labels || grid.n_layers != n_layers {
            return Err(Error::Shape("grids have different segment layouts or depths".into()));
        }
        for (r, seg) in segs.iter().enumerate() {
            for layer in 0..n_layers {
                let sum: f64 = seg.positions().map(|p| grid.delta[grid.at(p, layer)]).sum();
                acc[r * n_layers + layer] += sum / seg.len() as f64;
            }
        }
    }
    let n = grids.len() as f64;
    Ok(SegmentGrid {
        rows: row_names(&labels),
        n_layers,
        values: acc.into_iter().map(|v| v / n).collect(),
    })
}
