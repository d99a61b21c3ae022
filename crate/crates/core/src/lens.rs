// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens: read intermediate residual states through the final norm
//! and the unembedding.
//!
//! Every intermediate projection uses the final norm with its trained gain
//! and bias, so at the last layer the projection of `R2` is exactly the
//! model's output logits. Absolute values at earlier layers depend on that
//! choice; rankings at the last layer do not.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{strip_one_space, top_k_indices, ActivationTrace, Model, Site};
use crate::tensor;
use crate::tokenizer::TokenId;

/// Sites tracked by [`trajectory`], in output order.
pub const TRAJECTORY_SITES: [Site; 4] = [Site::R1, Site::R2, Site::A, Site::M];

/// A named set of token ids whose logit is the max over members.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSet {
    pub name: String,
    /// Sorted, deduplicated.
    pub tokens: Vec<TokenId>,
}

impl TokenSet {
    pub fn new(name: impl Into<String>, mut tokens: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        let name = name.into();
        tokens.sort_unstable();
        tokens.dedup();
        if tokens.is_empty() {
            return Err(Error::Invalid(format!("token set `{name}` is empty")));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::OutOfRange(format!("token {t} in set `{name}` >= vocab {vocab_size}")));
        }
        Ok(Self { name, tokens })
    }

    /// First sub-token of each word, tokenized with a leading space.
    pub fn from_words(model: &Model, name: impl Into<String>, words: &[String]) -> Result<Self> {
        let tokens = words
            .iter()
            .filter_map(|w| model.candidate_tokens(w).first().copied())
            .collect();
        Self::new(name, tokens, model.config().vocab_size)
    }

    /// All sub-tokens of a candidate string, tokenized with a leading space.
    pub fn from_candidate(model: &Model, text: &str) -> Result<Self> {
        Self::new(text, model.candidate_tokens(text), model.config().vocab_size)
    }
}

/// Max logit over the set.
pub fn token_set_logit(logits: &[f32], set: &TokenSet) -> f32 {
    set.tokens
        .iter()
        .map(|&t| logits[t as usize])
        .fold(f32::NEG_INFINITY, f32::max)
}

/// Class word lists keyed by relation type.
pub fn load_class_lists(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<String>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn class_token_sets(model: &Model, lists: &BTreeMap<String, Vec<String>>) -> Result<Vec<TokenSet>> {
    lists
        .iter()
        .map(|(name, words)| TokenSet::from_words(model, name.clone(), words))
        .collect()
}

/// Per-layer, per-site set logits at the last token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitTrajectory {
    pub n_layers: usize,
    pub sets: Vec<String>,
    /// `[layer][site in TRAJECTORY_SITES][set]`.
    pub values: Vec<f32>,
}

impl LogitTrajectory {
    fn index(&self, layer: usize, site: Site, set: usize) -> usize {
        let s = TRAJECTORY_SITES
            .iter()
            .position(|&x| x == site)
            .expect("site is tracked");
        (layer * TRAJECTORY_SITES.len() + s) * self.sets.len() + set
    }

    pub fn get(&self, layer: usize, site: Site, set: usize) -> f32 {
        self.values[self.index(layer, site, set)]
    }

    pub fn set_index(&self, name: &str) -> Option<usize> {
        self.sets.iter().position(|s| s == name)
    }

    /// Series over layers for one site and set.
    pub fn series(&self, site: Site, set: usize) -> Vec<f32> {
        (0..self.n_layers).map(|l| self.get(l, site, set)).collect()
    }

    pub fn rows(&self, prompt_id: &str) -> Vec<TrajectoryRow> {
        let mut out = Vec::with_capacity(self.values.len());
        for layer in 0..self.n_layers {
            for site in TRAJECTORY_SITES {
                for (i, name) in self.sets.iter().enumerate() {
                    out.push(TrajectoryRow {
                        prompt_id: prompt_id.to_string(),
                        layer,
                        site,
                        set: name.clone(),
                        logit: self.get(layer, site, i),
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub prompt_id: String,
    pub layer: usize,
    pub site: Site,
    pub set: String,
    pub logit: f32,
}

pub fn trajectory(model: &Model, trace: &ActivationTrace, tracked: &[TokenSet]) -> LogitTrajectory {
    let last = trace.last_position();
    let mut values = Vec::with_capacity(trace.n_layers * TRAJECTORY_SITES.len() * tracked.len());
    for layer in 0..trace.n_layers {
        for site in TRAJECTORY_SITES {
            let logits = model.project_to_vocab(trace.state(site, layer, last));
            values.extend(tracked.iter().map(|s| token_set_logit(&logits, s)));
        }
    }
    LogitTrajectory {
        n_layers: trace.n_layers,
        sets: tracked.iter().map(|s| s.name.clone()).collect(),
        values,
    }
}

/// Element-wise arithmetic mean of trajectories over the same sets.
pub fn mean_trajectory(trajectories: &[LogitTrajectory]) -> Result<LogitTrajectory> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::Invalid("mean of zero trajectories".into()))?;
    let mut acc = vec![0f64; first.values.len()];
    for t in trajectories {
        if t.sets != first.sets || t.n_layers != first.n_layers {
            return Err(Error::Shape("trajectories track different sets or depths".into()));
        }
        for (a, v) in acc.iter_mut().zip(&t.values) {
            *a += *v as f64;
        }
    }
    let n = trajectories.len() as f64;
    Ok(LogitTrajectory {
        n_layers: first.n_layers,
        sets: first.sets.clone(),
        values: acc.into_iter().map(|a| (a / n) as f32).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensRow {
    pub layer: usize,
    pub site: Site,
    pub rank: usize,
    pub token_id: TokenId,
    pub token: String,
    pub prob: f32,
}

/// Top-`k` tokens (full vocabulary) with softmax probabilities for R1 and
/// R2 at every layer, last token.
pub fn logit_lens_table(model: &Model, trace: &ActivationTrace, k: usize) -> Result<Vec<LensRow>> {
    let last = trace.last_position();
    let mut rows = Vec::new();
    for layer in 0..trace.n_layers {
        for site in [Site::R1, Site::R2] {
            let mut probs = model.project_to_vocab(trace.state(site, layer, last));
            tensor::softmax_in_place(&mut probs)?;
            for (rank, i) in top_k_indices(&probs, k, |_| true).into_iter().enumerate() {
                rows.push(LensRow {
                    layer,
                    site,
                    rank,
                    token_id: i as TokenId,
                    token: strip_one_space(&model.tokenizer().decode_token(i as TokenId)).to_string(),
                    prob: probs[i],
                });
            }
        }
    }
    Ok(rows)
}
