// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight store and checkpoint name translation.
//!
//! Canonical tensor names (all matrices stored `in x out`, i.e. activations
//! are right-multiplied):
//!
//! | canonical                    | shape        |
//! |------------------------------|--------------|
//! | `embed.tokens`               | `[V, d]`     |
//! | `embed.positions`            | `[max_seq, d]` (learned positions only) |
//! | `layers.{l}.attn_norm.weight`| `[d]` (+ `.bias` for LayerNorm) |
//! | `layers.{l}.attn.{q,k,v,o}.weight` | `[d, d]` (+ optional `.bias`) |
//! | `layers.{l}.mlp_norm.weight` | `[d]` (+ `.bias` for LayerNorm) |
//! | `layers.{l}.mlp.up.weight`   | `[d, ff]` (+ optional `.bias`) |
//! | `layers.{l}.mlp.gate.weight` | `[d, ff]` (gated MLP only) |
//! | `layers.{l}.mlp.down.weight` | `[ff, d]` (+ optional `.bias`) |
//! | `final_norm.weight`          | `[d]` (+ `.bias` for LayerNorm) |
//! | `unembed.weight`             | `[V, d]` (untied only, + optional `.bias`) |
//!
//! GPT-2 and Llama checkpoints are translated on load; see
//! `docs/tensor-names.md` for the full table.

use std::path::Path;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, NormKind, PosKind};
use crate::tensor::{self, Tensor};
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[in, out]`, row-major.
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    /// `out[T x n_out] = x[T x n_in] * W + b`.
    pub fn apply(&self, x: &[f32], rows: usize, out: &mut [f32]) {
        tensor::matmul_into(x, &self.weight, out, rows, self.n_in, self.n_out);
        if let Some(b) = &self.bias {
            for row in out.chunks_mut(self.n_out) {
                for (o, bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub attn_norm: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub mlp_norm: Norm,
    pub up: Linear,
    pub gate: Option<Linear>,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub enum Unembedding {
    /// Transpose of the input embedding.
    Tied,
    Separate { rows: Tensor, bias: Option<Vec<f32>> },
}

/// Immutable weight store plus tokenizer. Shareable across threads.
#[derive(Debug, Clone)]
pub struct Model {
    pub(crate) config: ModelConfig,
    pub(crate) tokenizer: Tokenizer,
    pub(crate) tok_embed: Tensor,
    pub(crate) pos_embed: Option<Tensor>,
    pub(crate) layers: Vec<Layer>,
    pub(crate) final_norm: Norm,
    pub(crate) unembed: Unembedding,
    pub(crate) capitalized: Vec<bool>,
    pub(crate) id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Naming {
    Canonical,
    Gpt2,
    Llama,
}

fn detect_naming(archive: &Archive) -> Result<Naming> {
    if archive.contains("gpt_neox.embed_in.weight") {
        return Err(Error::Config(
            "GPT-NeoX (Pythia) checkpoints use a parallel residual and are not supported".into(),
        ));
    }
    if archive.contains("wte.weight") || archive.contains("transformer.wte.weight") {
        Ok(Naming::Gpt2)
    } else if archive.contains("model.embed_tokens.weight") {
        Ok(Naming::Llama)
    } else {
        Ok(Naming::Canonical)
    }
}

/// Rename (and reshape where needed) a GPT-2 archive to canonical names.
fn translate_gpt2(src: Archive, config: &ModelConfig) -> Result<Archive> {
    let mut src = src;
    let d = config.d_model;
    let mut out = Archive::new();
    let names: Vec<String> = src.names().map(str::to_string).collect();
    for name in names {
        let tensor = src.remove(&name).expect("listed");
        let short = name.strip_prefix("transformer.").unwrap_or(&name);
        let parts: Vec<&str> = short.split('.').collect();
        match parts.as_slice() {
            ["wte", "weight"] => out.insert("embed.tokens", tensor),
            ["wpe", "weight"] => out.insert("embed.positions", tensor),
            ["ln_f", p] => out.insert(format!("final_norm.{p}"), tensor),
            ["lm_head", "weight"] => {
                if !config.tied_unembed {
                    out.insert("unembed.weight", tensor)
                }
            }
            ["h", l, "ln_1", p] => out.insert(format!("layers.{l}.attn_norm.{p}"), tensor),
            ["h", l, "ln_2", p] => out.insert(format!("layers.{l}.mlp_norm.{p}"), tensor),
            ["h", l, "attn", "c_attn", p] => {
                // fused [d, 3d] weight / [3d] bias, column blocks q | k | v
                let cols = 3 * d;
                let rows = tensor.len() / cols;
                if tensor.len() != rows * cols || (*p == "weight" && rows != d) {
                    return Err(Error::Shape(format!("`{name}` is not [{d}, {cols}]")));
                }
                for (which, key) in ["q", "k", "v"].iter().enumerate() {
                    let mut data = Vec::with_capacity(rows * d);
                    for r in 0..rows {
                        let base = r * cols + which * d;
                        data.extend_from_slice(&tensor.data()[base..base + d]);
                    }
                    let shape = if *p == "weight" { vec![d, d] } else { vec![d] };
                    out.insert(format!("layers.{l}.attn.{key}.{p}"), Tensor::new(shape, data)?);
                }
            }
            ["h", l, "attn", "c_proj", p] => out.insert(format!("layers.{l}.attn.o.{p}"), tensor),
            ["h", l, "mlp", "c_fc", p] => out.insert(format!("layers.{l}.mlp.up.{p}"), tensor),
            ["h", l, "mlp", "c_proj", p] => out.insert(format!("layers.{l}.mlp.down.{p}"), tensor),
            // causal-mask buffers stored by some exporters
            ["h", _, "attn", "bias"] | ["h", _, "attn", "masked_bias"] => {}
            _ => return Err(Error::Archive(format!("unrecognized GPT-2 tensor `{name}`"))),
        }
    }
    Ok(out)
}

/// Llama stores `[out, in]` matrices; transpose into canonical layout.
fn translate_llama(src: Archive) -> Result<Archive> {
    let mut src = src;
    let mut out = Archive::new();
    let names: Vec<String> = src.names().map(str::to_string).collect();
    for name in names {
        let tensor = src.remove(&name).expect("listed");
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["model", "embed_tokens", "weight"] => out.insert("embed.tokens", tensor),
            ["model", "norm", "weight"] => out.insert("final_norm.weight", tensor),
            ["lm_head", "weight"] => out.insert("unembed.weight", tensor),
            ["model", "layers", l, "input_layernorm", "weight"] => {
                out.insert(format!("layers.{l}.attn_norm.weight"), tensor)
            }
            ["model", "layers", l, "post_attention_layernorm", "weight"] => {
                out.insert(format!("layers.{l}.mlp_norm.weight"), tensor)
            }
            ["model", "layers", l, "self_attn", proj, "weight"] => {
                let key = match *proj {
                    "q_proj" => "q",
                    "k_proj" => "k",
                    "v_proj" => "v",
                    "o_proj" => "o",
                    _ => return Err(Error::Archive(format!("unrecognized Llama tensor `{name}`"))),
                };
                out.insert(format!("layers.{l}.attn.{key}.weight"), tensor.transpose()?)
            }
            ["model", "layers", l, "mlp", proj, "weight"] => {
                let key = match *proj {
                    "gate_proj" => "gate",
                    "up_proj" => "up",
                    "down_proj" => "down",
                    _ => return Err(Error::Archive(format!("unrecognized Llama tensor `{name}`"))),
                };
                out.insert(format!("layers.{l}.mlp.{key}.weight"), tensor.transpose()?)
            }
            ["model", "layers", _, "self_attn", "rotary_emb", "inv_freq"] => {}
            _ => return Err(Error::Archive(format!("unrecognized Llama tensor `{name}`"))),
        }
    }
    Ok(out)
}

struct Taker<'a> {
    archive: &'a mut Archive,
}

impl Taker<'_> {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.archive.take(name)?;
        if t.shape() != shape {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    fn take_opt(&mut self, name: &str, shape: &[usize]) -> Result<Option<Vec<f32>>> {
        if self.archive.contains(name) {
            Ok(Some(self.take(name, shape)?.into_data()))
        } else {
            Ok(None)
        }
    }

    fn norm(&mut self, prefix: &str, d: usize, kind: NormKind) -> Result<Norm> {
        let gain = self.take(&format!("{prefix}.weight"), &[d])?.into_data();
        let bias = match kind {
            NormKind::LayerNorm => Some(self.take(&format!("{prefix}.bias"), &[d])?.into_data()),
            NormKind::RmsNorm => None,
        };
        Ok(Norm { gain, bias })
    }

    fn linear(&mut self, prefix: &str, n_in: usize, n_out: Option<usize>) -> Result<Linear> {
        let name = format!("{prefix}.weight");
        let w = self.archive.take(&name)?;
        let (rows, cols) = w.dims2()?;
        if rows != n_in || n_out.is_some_and(|n| n != cols) {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {:?}, expected [{n_in}, {}]",
                w.shape(),
                n_out.map_or("*".to_string(), |n| n.to_string())
            )));
        }
        let bias = self.take_opt(&format!("{prefix}.bias"), &[cols])?;
        Ok(Linear {
            weight: w.into_data(),
            bias,
            n_in: rows,
            n_out: cols,
        })
    }
}

impl Model {
    /// Build a model from an in-memory archive.
    pub fn from_archive(archive: Archive, tokenizer: Tokenizer, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut archive = match detect_naming(&archive)? {
            Naming::Canonical => archive,
            Naming::Gpt2 => translate_gpt2(archive, &config)?,
            Naming::Llama => translate_llama(archive)?,
        };
        let d = config.d_model;
        let v = config.vocab_size;
        if tokenizer.vocab_size() > v {
            return Err(Error::Config(format!(
                "tokenizer has {} tokens but the model vocabulary is {v}",
                tokenizer.vocab_size()
            )));
        }
        let mut tk = Taker {
            archive: &mut archive,
        };
        let tok_embed = tk.take("embed.tokens", &[v, d])?;
        let pos_embed = match config.pos_kind {
            PosKind::Learned => Some(tk.take("embed.positions", &[config.max_seq, d])?),
            PosKind::Rotary => None,
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            let attn_norm = tk.norm(&format!("{p}.attn_norm"), d, config.norm_kind)?;
            let q = tk.linear(&format!("{p}.attn.q"), d, Some(d))?;
            let k = tk.linear(&format!("{p}.attn.k"), d, Some(d))?;
            let vv = tk.linear(&format!("{p}.attn.v"), d, Some(d))?;
            let o = tk.linear(&format!("{p}.attn.o"), d, Some(d))?;
            let mlp_norm = tk.norm(&format!("{p}.mlp_norm"), d, config.norm_kind)?;
            let up = tk.linear(&format!("{p}.mlp.up"), d, None)?;
            let ff = up.n_out;
            let gate = if config.gated_mlp {
                Some(tk.linear(&format!("{p}.mlp.gate"), d, Some(ff))?)
            } else {
                None
            };
            let down = tk.linear(&format!("{p}.mlp.down"), ff, Some(d))?;
            layers.push(Layer {
                attn_norm,
                q,
                k,
                v: vv,
                o,
                mlp_norm,
                up,
                gate,
                down,
            });
        }
        let final_norm = tk.norm("final_norm", d, config.norm_kind)?;
        let unembed = if config.tied_unembed {
            Unembedding::Tied
        } else {
            let rows = tk.take("unembed.weight", &[v, d])?;
            let bias = tk.take_opt("unembed.bias", &[v])?;
            Unembedding::Separate { rows, bias }
        };
        if let Some(extra) = archive.names().next() {
            return Err(Error::Archive(format!(
                "tensor `{extra}` is not part of the configured architecture"
            )));
        }
        let weights = [&tok_embed]
            .into_iter()
            .chain(pos_embed.as_ref())
            .all(Tensor::all_finite);
        if !weights {
            return Err(Error::NonFinite("embedding weights".into()));
        }
        let capitalized = capitalized_mask(&tokenizer, v);
        Ok(Self {
            config,
            tokenizer,
            tok_embed,
            pos_embed,
            layers,
            final_norm,
            unembed,
            capitalized,
            id: String::new(),
        })
    }

    /// Load archive + tokenizer files. `config` overrides any config file.
    pub fn load(
        archive_path: impl AsRef<Path>,
        vocab_path: impl AsRef<Path>,
        merges_path: impl AsRef<Path>,
        config: ModelConfig,
    ) -> Result<Self> {
        let archive_path = archive_path.as_ref();
        let archive = Archive::load(archive_path)?;
        let tokenizer = Tokenizer::load(vocab_path, merges_path)?;
        let mut model = Self::from_archive(archive, tokenizer, config)?;
        model.id = archive_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(model)
    }

    /// Load `model.safetensors`, `vocab.json`, `merges.txt` and `config.json`
    /// from one directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = ModelConfig::load(dir.join("config.json"))?;
        let mut model = Self::load(
            dir.join("model.safetensors"),
            dir.join("vocab.json"),
            dir.join("merges.txt"),
            config,
        )?;
        model.id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Input embedding matrix `[V, d]`.
    pub fn token_embeddings(&self) -> &Tensor {
        &self.tok_embed
    }

    /// Whether a token's surface form, minus one leading space, starts with A-Z.
    pub fn is_capitalized(&self, id: TokenId) -> bool {
        self.capitalized.get(id as usize).copied().unwrap_or(false)
    }

    pub(crate) fn unembed_row(&self, v: usize) -> &[f32] {
        match &self.unembed {
            Unembedding::Tied => self.tok_embed.row(v),
            Unembedding::Separate { rows, .. } => rows.row(v),
        }
    }

    pub(crate) fn unembed_bias(&self) -> Option<&[f32]> {
        match &self.unembed {
            Unembedding::Tied => None,
            Unembedding::Separate { bias, .. } => bias.as_deref(),
        }
    }
}

/// Strip exactly one leading space.
pub fn strip_one_space(s: &str) -> &str {
    s.strip_prefix(' ').unwrap_or(s)
}

pub(crate) fn capitalized_mask(tokenizer: &Tokenizer, vocab_size: usize) -> Vec<bool> {
    (0..vocab_size)
        .map(|id| {
            if id >= tokenizer.vocab_size() {
                return false;
            }
            let text = tokenizer.decode_token(id as TokenId);
            strip_one_space(&text)
                .chars()
                .next()
                .is_some_and(|c| c.is_ascii_uppercase())
        })
        .collect()
}
