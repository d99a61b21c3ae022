// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic synthetic checkpoints for tests, fixtures and desk runs.
//!
//! Two pieces:
//!
//! - [`train_bpe`] learns byte-level BPE merges from a text list (most
//!   frequent adjacent pair first, ties broken by the lexicographically
//!   smallest pair, so training is reproducible).
//! - [`synth_checkpoint`] draws GPT-2-architecture weights (LayerNorm,
//!   learned positions, GELU, tied unembedding) from a seeded ChaCha8
//!   stream. Attention value/output maps carry an identity component so
//!   heads copy attended token embeddings forward; this gives the random
//!   model measurable context sensitivity.
//!
//! The weights are not trained. They exercise every code path with real
//! shapes, not language-model behaviour.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::behavior::RelationRecord;
use crate::error::{Error, Result};
use crate::model::{Activation, ModelConfig, NormKind, PosKind};
use crate::tensor::Tensor;
use crate::tokenizer::{bytes_to_unicode, encode_bytes, pretokenize, TokenId, Tokenizer};

pub const END_OF_TEXT: &str = "<|endoftext|>";

/// Train byte-level BPE with at most `n_merges` merges. Pairs seen fewer
/// than twice are never merged. `specials` are appended after the merges.
pub fn train_bpe(texts: &[String], n_merges: usize, specials: &[&str]) -> Result<Tokenizer> {
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for text in texts {
        for piece in pretokenize(text) {
            *word_counts.entry(encode_bytes(piece)).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, u64)> = word_counts
        .into_iter()
        .map(|(w, c)| (w.chars().map(String::from).collect(), c))
        .collect();

    let mut vocab: HashMap<String, TokenId> = bytes_to_unicode()
        .iter()
        .enumerate()
        .map(|(b, c)| (c.to_string(), b as TokenId))
        .collect();
    let mut merges = Vec::new();

    for _ in 0..n_merges {
        let mut pairs: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += count;
            }
        }
        // max count, smallest pair on ties (BTreeMap iterates ascending)
        let mut best: Option<((&str, &str), u64)> = None;
        for (pair, count) in pairs {
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((pair, count));
            }
        }
        let Some(((a, b), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (a, b) = (a.to_string(), b.to_string());
        let merged = format!("{a}{b}");
        for (symbols, _) in words.iter_mut() {
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            *symbols = out;
        }
        let id = vocab.len() as TokenId;
        vocab.insert(merged, id);
        merges.push((a, b));
    }
    for s in specials {
        let id = vocab.len() as TokenId;
        if vocab.insert(s.to_string(), id).is_some() {
            return Err(Error::Tokenizer(format!("special token `{s}` collides with a merge")));
        }
    }
    Tokenizer::new(vocab, merges)
}

/// Shape and seed of a synthetic checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
    /// BPE merges learned from the training text.
    pub n_merges: usize,
    /// Strength of the identity component in the attention value/output path.
    pub copy_gain: f32,
    /// Standard deviation of pre-softmax attention scores.
    pub score_std: f32,
}

impl SynthSpec {
    /// Two-layer toy used by shipped fixtures.
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq: 64,
            seed: 1,
            n_merges: 300,
            copy_gain: 1.0,
            score_std: 2.0,
        }
    }

    /// Twelve-layer GPT-2-architecture model, narrow enough for CPU desk runs.
    pub fn gpt2_class() -> Self {
        Self {
            n_layers: 12,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            max_seq: 128,
            seed: 2024,
            n_merges: 2000,
            copy_gain: 1.0,
            score_std: 3.0,
        }
    }
}

struct Draw {
    rng: ChaCha8Rng,
}

impl Draw {
    fn normal(&mut self, n: usize, std: f32) -> Vec<f32> {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    fn around(&mut self, n: usize, center: f32, std: f32) -> Vec<f32> {
        self.normal(n, std).into_iter().map(|v| v + center).collect()
    }

    /// `gain * I + N(0, std)` of shape `[n, n]`.
    fn near_identity(&mut self, n: usize, gain: f32, std: f32) -> Vec<f32> {
        let mut w = self.normal(n * n, std);
        for i in 0..n {
            w[i * n + i] += gain;
        }
        w
    }
}

/// Draw a GPT-2-architecture checkpoint in canonical tensor names.
pub fn synth_checkpoint(
    spec: &SynthSpec,
    vocab_size: usize,
    bos_token_id: Option<TokenId>,
) -> Result<(ModelConfig, Archive)> {
    if !spec.d_model.is_multiple_of(spec.n_heads) {
        return Err(Error::Config("d_model must be divisible by n_heads".into()));
    }
    let config = ModelConfig {
        n_layers: spec.n_layers,
        d_model: spec.d_model,
        n_heads: spec.n_heads,
        d_head: spec.d_model / spec.n_heads,
        vocab_size,
        max_seq: spec.max_seq,
        norm_kind: NormKind::LayerNorm,
        pos_kind: PosKind::Learned,
        activation: Activation::Gelu,
        tied_unembed: true,
        bos_token_id,
        norm_eps: 1e-5,
        rope_theta: 10_000.0,
        gated_mlp: false,
        parallel_residual: false,
    };
    config.validate()?;
    let d = spec.d_model;
    let ff = spec.d_ff;
    let mut draw = Draw {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let mut a = Archive::new();
    let put = |a: &mut Archive, name: String, shape: Vec<usize>, data: Vec<f32>| -> Result<()> {
        a.insert(name, Tensor::new(shape, data)?);
        Ok(())
    };
    put(&mut a, "embed.tokens".into(), vec![vocab_size, d], draw.normal(vocab_size * d, 1.0))?;
    put(&mut a, "embed.positions".into(), vec![spec.max_seq, d], draw.normal(spec.max_seq * d, 0.1))?;
    // q.k / sqrt(dh) has std ~ d * s^2 for LayerNorm-ed inputs
    let qk_std = (spec.score_std / d as f32).sqrt();
    for l in 0..spec.n_layers {
        let p = format!("layers.{l}");
        // copying grows with depth; the first third copies weakly
        let gain = if l * 3 < spec.n_layers {
            0.3 * spec.copy_gain
        } else {
            spec.copy_gain
        };
        put(&mut a, format!("{p}.attn_norm.weight"), vec![d], draw.around(d, 1.0, 0.05))?;
        put(&mut a, format!("{p}.attn_norm.bias"), vec![d], draw.normal(d, 0.02))?;
        for key in ["q", "k"] {
            put(&mut a, format!("{p}.attn.{key}.weight"), vec![d, d], draw.normal(d * d, qk_std))?;
            put(&mut a, format!("{p}.attn.{key}.bias"), vec![d], draw.normal(d, 0.02))?;
        }
        let noise = 0.3 / (d as f32).sqrt();
        put(&mut a, format!("{p}.attn.v.weight"), vec![d, d], draw.near_identity(d, gain.sqrt(), noise))?;
        put(&mut a, format!("{p}.attn.v.bias"), vec![d], draw.normal(d, 0.02))?;
        put(&mut a, format!("{p}.attn.o.weight"), vec![d, d], draw.near_identity(d, gain.sqrt(), noise))?;
        put(&mut a, format!("{p}.attn.o.bias"), vec![d], draw.normal(d, 0.02))?;
        put(&mut a, format!("{p}.mlp_norm.weight"), vec![d], draw.around(d, 1.0, 0.05))?;
        put(&mut a, format!("{p}.mlp_norm.bias"), vec![d], draw.normal(d, 0.02))?;
        put(&mut a, format!("{p}.mlp.up.weight"), vec![d, ff], draw.normal(d * ff, 1.0 / (d as f32).sqrt()))?;
        put(&mut a, format!("{p}.mlp.up.bias"), vec![ff], draw.normal(ff, 0.02))?;
        put(&mut a, format!("{p}.mlp.down.weight"), vec![ff, d], draw.normal(ff * d, 0.5 / (ff as f32).sqrt()))?;
        put(&mut a, format!("{p}.mlp.down.bias"), vec![d], draw.normal(d, 0.02))?;
    }
    put(&mut a, "final_norm.weight".into(), vec![d], draw.around(d, 1.0, 0.05))?;
    put(&mut a, "final_norm.bias".into(), vec![d], draw.normal(d, 0.02))?;
    Ok((config, a))
}

/// Write `config.json`, `model.safetensors`, `vocab.json`, `merges.txt`.
pub fn write_model_dir(
    dir: impl AsRef<Path>,
    config: &ModelConfig,
    archive: &Archive,
    tokenizer: &Tokenizer,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = serde_json::to_string_pretty(config)?;
    std::fs::write(dir.join("config.json"), cfg + "\n").map_err(|e| Error::io(dir, e))?;
    archive.save(dir.join("model.safetensors"))?;
    tokenizer.save(dir.join("vocab.json"), dir.join("merges.txt"))
}

/// Training text for a corpus tokenizer: every instantiated fact, plus
/// each extra word twice with a leading space so it can become one token.
pub fn corpus_texts(relations: &[RelationRecord], extra_words: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for r in relations {
        for t in &r.triplets {
            out.push(
                r.template
                    .replace(crate::model::SUBJECT_SLOT, &t.subject)
                    .replace(crate::model::OBJECT_SLOT, &t.object),
            );
        }
    }
    for w in extra_words {
        out.push(format!(" {w} {w}"));
    }
    out
}

/// Train a tokenizer on `texts`, draw weights, and write a model directory.
pub fn build_synthetic_model_dir(
    dir: impl AsRef<Path>,
    texts: &[String],
    spec: &SynthSpec,
) -> Result<()> {
    let tokenizer = train_bpe(texts, spec.n_merges, &[END_OF_TEXT])?;
    let bos = tokenizer.token_id(END_OF_TEXT);
    let (config, archive) = synth_checkpoint(spec, tokenizer.vocab_size(), bos)?;
    write_model_dir(dir, &config, &archive, &tokenizer)
}
