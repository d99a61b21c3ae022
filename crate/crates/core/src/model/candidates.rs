// SPDX-License-Identifier: MIT OR Apache-2.0

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::model::weights::{strip_one_space, Model};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenFilter {
    /// Surface form, minus one leading space, starts with A-Z.
    CapitalizedInitial,
    None,
}

/// One ranked next-token candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token_id: TokenId,
    /// Decoded surface form with one leading space stripped.
    pub text: String,
    pub logit: f32,
}

/// Descending logit, ties broken by ascending token id.
fn rank(logits: &[f32], a: usize, b: usize) -> Ordering {
    logits[b].total_cmp(&logits[a]).then(a.cmp(&b))
}

/// Indices of the `k` best entries among those passing `keep`.
pub fn top_k_indices(logits: &[f32], k: usize, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).filter(|&i| keep(i)).collect();
    if k == 0 {
        return Vec::new();
    }
    if idx.len() > k {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank(logits, a, b));
        idx.truncate(k);
    }
    idx.sort_by(|&a, &b| rank(logits, a, b));
    idx
}

impl Model {
    /// Top-`k` next-token candidates under `filter`. Returns fewer than `k`
    /// when not enough tokens pass the filter.
    pub fn top_k_restricted(&self, logits: &[f32], k: usize, filter: TokenFilter) -> Vec<Candidate> {
        let n = logits.len().min(self.config.vocab_size);
        let logits = &logits[..n];
        let ids = match filter {
            TokenFilter::CapitalizedInitial => top_k_indices(logits, k, |i| self.capitalized[i]),
            TokenFilter::None => top_k_indices(logits, k, |_| true),
        };
        ids.into_iter()
            .map(|i| Candidate {
                token_id: i as TokenId,
                text: strip_one_space(&self.tokenizer.decode_token(i as TokenId)).to_string(),
                logit: logits[i],
            })
            .collect()
    }

    /// Greedy restricted answer (temperature 0).
    pub fn greedy_answer(&self, logits: &[f32]) -> Option<Candidate> {
        self.top_k_restricted(logits, 1, TokenFilter::CapitalizedInitial)
            .into_iter()
            .next()
    }

    /// Token ids of a candidate string tokenized with a leading space.
    pub fn candidate_tokens(&self, text: &str) -> Vec<TokenId> {
        self.tokenizer
            .encode(&format!(" {text}"))
            .unwrap_or_default()
            .into_iter()
            .filter(|&id| (id as usize) < self.config.vocab_size)
            .collect()
    }
}
