// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with intervention hooks.

mod candidates;
mod config;
mod forward;
mod prompt;
mod weights;

pub use candidates::{top_k_indices, Candidate, TokenFilter};
pub use config::{Activation, ModelConfig, NormKind, PosKind};
pub use forward::{
    noise_sample, ActivationTrace, AttentionMask, EmbeddingNoise, Intervention, RestoreCell, Site,
};
pub use prompt::{
    build_prompt, prompt_text, Condition, ContextFact, QueryFact, Segment, SegmentLabel,
    TokenizedPrompt, OBJECT_SLOT, SUBJECT_SLOT,
};
pub use weights::{strip_one_space, Layer, Linear, Model, Norm, Unembedding};

impl Model {
    /// Build a segmented prompt with this model's tokenizer and BOS token.
    pub fn build_prompt(
        &self,
        context: Option<&ContextFact>,
        query: &QueryFact,
        condition: Condition,
    ) -> crate::Result<TokenizedPrompt> {
        build_prompt(&self.tokenizer, self.config.bos_token_id, context, query, condition)
    }
}
