// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosKind {
    Learned,
    Rotary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Silu,
}

fn default_eps() -> f32 {
    1e-5
}

fn default_rope_theta() -> f32 {
    10_000.0
}

/// Architecture description of a sequential pre-norm decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_kind: NormKind,
    pub pos_kind: PosKind,
    pub activation: Activation,
    pub tied_unembed: bool,
    #[serde(default)]
    pub bos_token_id: Option<TokenId>,
    #[serde(default = "default_eps")]
    pub norm_eps: f32,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f32,
    /// Llama-style `silu(gate) * up` MLP.
    #[serde(default)]
    pub gated_mlp: bool,
    /// Parallel-residual checkpoints (GPT-NeoX style) are rejected.
    #[serde(default)]
    pub parallel_residual: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parallel_residual {
            return Err(Error::Config(
                "parallel-residual architectures are not supported; only sequential \
                 pre-norm blocks (norm -> attn -> add, norm -> mlp -> add)"
                    .into(),
            ));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "n_heads ({}) x d_head ({}) != d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.n_layers < 1 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary needs at least two tokens".into()));
        }
        if self.max_seq < 1 {
            return Err(Error::Config("max_seq must be positive".into()));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        if self.pos_kind == PosKind::Rotary && !self.d_head.is_multiple_of(2) {
            return Err(Error::Config("rotary embeddings need an even d_head".into()));
        }
        if let Some(bos) = self.bos_token_id {
            if bos as usize >= self.vocab_size {
                return Err(Error::Config(format!("bos_token_id {bos} outside vocabulary")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        Self::from_json(&value)
    }

    /// Accepts this crate's own config format or a Hugging Face
    /// `config.json` for GPT-2, Llama or GPT-NeoX (the last is rejected).
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let config = match value.get("model_type").and_then(|v| v.as_str()) {
            None => serde_json::from_value::<ModelConfig>(value.clone())?,
            Some("gpt2") => from_hf_gpt2(value)?,
            Some("llama") | Some("mistral") => from_hf_llama(value)?,
            Some("gpt_neox") => {
                return Err(Error::Config(
                    "GPT-NeoX (Pythia) checkpoints use a parallel residual and are not supported"
                        .into(),
                ))
            }
            Some(other) => return Err(Error::Config(format!("unknown model_type `{other}`"))),
        };
        config.validate()?;
        Ok(config)
    }
}

fn field(value: &serde_json::Value, key: &str) -> Result<usize> {
    value
        .get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| Error::Config(format!("config is missing integer field `{key}`")))
}

fn from_hf_gpt2(value: &serde_json::Value) -> Result<ModelConfig> {
    let d_model = field(value, "n_embd")?;
    let n_heads = field(value, "n_head")?;
    Ok(ModelConfig {
        n_layers: field(value, "n_layer")?,
        d_model,
        n_heads,
        d_head: d_model / n_heads.max(1),
        vocab_size: field(value, "vocab_size")?,
        max_seq: field(value, "n_positions")?,
        norm_kind: NormKind::LayerNorm,
        pos_kind: PosKind::Learned,
        activation: Activation::Gelu,
        tied_unembed: value
            .get("tie_word_embeddings")
            .and_then(|v| v.as_bool())
            .unwrap_or(true),
        bos_token_id: value.get("bos_token_id").and_then(|v| v.as_u64()).map(|v| v as TokenId),
        norm_eps: value
            .get("layer_norm_epsilon")
            .and_then(|v| v.as_f64())
            .unwrap_or(1e-5) as f32,
        rope_theta: default_rope_theta(),
        gated_mlp: false,
        parallel_residual: false,
    })
}

fn from_hf_llama(value: &serde_json::Value) -> Result<ModelConfig> {
    let d_model = field(value, "hidden_size")?;
    let n_heads = field(value, "num_attention_heads")?;
    if let Some(kv) = value.get("num_key_value_heads").and_then(|v| v.as_u64()) {
        if kv as usize != n_heads {
            return Err(Error::Config("grouped-query attention is not supported".into()));
        }
    }
    Ok(ModelConfig {
        n_layers: field(value, "num_hidden_layers")?,
        d_model,
        n_heads,
        d_head: d_model / n_heads.max(1),
        vocab_size: field(value, "vocab_size")?,
        max_seq: field(value, "max_position_embeddings")?,
        norm_kind: NormKind::RmsNorm,
        pos_kind: PosKind::Rotary,
        activation: Activation::Silu,
        tied_unembed: value
            .get("tie_word_embeddings")
            .and_then(|v| v.as_bool())
            .unwrap_or(false),
        bos_token_id: value.get("bos_token_id").and_then(|v| v.as_u64()).map(|v| v as TokenId),
        norm_eps: value.get("rms_norm_eps").and_then(|v| v.as_f64()).unwrap_or(1e-6) as f32,
        rope_theta: value.get("rope_theta").and_then(|v| v.as_f64()).unwrap_or(10_000.0) as f32,
        gated_mlp: true,
        parallel_residual: false,
    })
}
