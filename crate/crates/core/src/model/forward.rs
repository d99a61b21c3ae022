// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented forward pass.
//!
//! Per layer `l` and token `i` the pass records
//!
//! ```text
//! R0[i,l]  residual entering the layer
//! A[i,l]   = attn(norm(R0))      R1[i,l] = A[i,l] + R0[i,l]
//! M[i,l]   = mlp(norm(R1))       R2[i,l] = M[i,l] + R1[i,l]
//! R0[i,l+1] = R2[i,l]
//! ```
//!
//! Interventions: Gaussian noise on token embeddings before the first
//! layer, restoration of `R2` cells from a clean trace, and attention
//! knockout (pre-softmax scores set to -inf for chosen keys of one query
//! row, all heads, at chosen layers). A restored cell's `R2` is the copied
//! clean value, so `R2 = M + R1` does not hold at that one cell.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{Activation, NormKind, PosKind};
use crate::model::weights::{Layer, Model, Norm};
use crate::tensor::{self, all_finite};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingNoise {
    pub positions: Vec<usize>,
    pub sigma: f32,
    pub seed: u64,
}

/// Overwrite `R2[position, layer]` with the clean trace's value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RestoreCell {
    pub position: usize,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMask {
    pub layers: Vec<usize>,
    pub query_position: usize,
    pub masked_keys: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub embedding_noise: Option<EmbeddingNoise>,
    /// Usually one cell; several cells restore simultaneously.
    pub restore: Vec<RestoreCell>,
    pub attention_mask: Option<AttentionMask>,
}

impl Intervention {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn noise(positions: Vec<usize>, sigma: f32, seed: u64) -> Self {
        Self {
            embedding_noise: Some(EmbeddingNoise {
                positions,
                sigma,
                seed,
            }),
            ..Self::default()
        }
    }

    pub fn knockout(layers: Vec<usize>, query_position: usize, masked_keys: Vec<usize>) -> Self {
        Self {
            attention_mask: Some(AttentionMask {
                layers,
                query_position,
                masked_keys,
            }),
            ..Self::default()
        }
    }
}

/// Residual-stream site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    R0,
    A,
    R1,
    M,
    R2,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::R0 => "R0",
            Site::A => "A",
            Site::R1 => "R1",
            Site::M => "M",
            Site::R2 => "R2",
        }
    }
}

/// Full record of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub n_layers: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// `[L][T][d]` for each site.
    pub r0: Vec<f32>,
    pub attn_out: Vec<f32>,
    pub r1: Vec<f32>,
    pub mlp_out: Vec<f32>,
    pub r2: Vec<f32>,
    /// `[L][H][T][T]` scaled dot products before any masking. Entries above
    /// the diagonal (future keys) are `-inf`.
    pub attn_scores: Vec<f32>,
    /// `[L][H][T][T]` attention weights after causal and knockout masking.
    pub attn_probs: Vec<f32>,
    /// Logits at the last position.
    pub final_logits: Vec<f32>,
    pub final_logprobs: Vec<f32>,
}

impl ActivationTrace {
    fn offset(&self, layer: usize, pos: usize) -> usize {
        (layer * self.seq_len + pos) * self.d_model
    }

    pub fn state(&self, site: Site, layer: usize, pos: usize) -> &[f32] {
        let o = self.offset(layer, pos);
        let buf = match site {
            Site::R0 => &self.r0,
            Site::A => &self.attn_out,
            Site::R1 => &self.r1,
            Site::M => &self.mlp_out,
            Site::R2 => &self.r2,
        };
        &buf[o..o + self.d_model]
    }

    /// `R2` of every position at `layer`, `[T][d]`.
    pub fn layer_output(&self, layer: usize) -> &[f32] {
        let o = self.offset(layer, 0);
        &self.r2[o..o + self.seq_len * self.d_model]
    }

    /// Attention weight row for `(layer, head, query)`, length T.
    pub fn attn_row(&self, layer: usize, head: usize, query: usize) -> &[f32] {
        let t = self.seq_len;
        let o = ((layer * self.n_heads + head) * t + query) * t;
        &self.attn_probs[o..o + t]
    }

    pub fn score_row(&self, layer: usize, head: usize, query: usize) -> &[f32] {
        let t = self.seq_len;
        let o = ((layer * self.n_heads + head) * t + query) * t;
        &self.attn_scores[o..o + t]
    }

    pub fn last_position(&self) -> usize {
        self.seq_len - 1
    }
}

/// Seeded Gaussian noise, one `d`-vector per position in ascending
/// position order. Components are drawn row by row from ChaCha8.
pub fn noise_sample(positions: &[usize], d: usize, sigma: f32, seed: u64) -> Vec<(usize, Vec<f32>)> {
    let sorted: BTreeSet<usize> = positions.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted
        .into_iter()
        .map(|p| {
            let row = (0..d)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    sigma * z
                })
                .collect();
            (p, row)
        })
        .collect()
}

struct Recorder {
    r0: Vec<f32>,
    attn_out: Vec<f32>,
    r1: Vec<f32>,
    mlp_out: Vec<f32>,
    r2: Vec<f32>,
    attn_scores: Vec<f32>,
    attn_probs: Vec<f32>,
}

struct LayerScratch<'a> {
    scores: Option<&'a mut [f32]>,
    probs: Option<&'a mut [f32]>,
}

impl Model {
    /// Token + position embeddings with optional noise added to the token part.
    fn embed(&self, tokens: &[TokenId], noise: Option<&EmbeddingNoise>) -> Result<Vec<f32>> {
        let d = self.config.d_model;
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Invalid("empty prompt".into()));
        }
        if t > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: t,
                max: self.config.max_seq,
            });
        }
        let mut x = vec![0.0f32; t * d];
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.config.vocab_size {
                return Err(Error::OutOfRange(format!("token id {tok} at position {i}")));
            }
            x[i * d..(i + 1) * d].copy_from_slice(self.tok_embed.row(tok as usize));
        }
        if let Some(n) = noise {
            if let Some(&bad) = n.positions.iter().find(|&&p| p >= t) {
                return Err(Error::OutOfRange(format!("noise position {bad} for {t} tokens")));
            }
            if n.sigma != 0.0 {
                for (p, row) in noise_sample(&n.positions, d, n.sigma, n.seed) {
                    for (xv, nv) in x[p * d..(p + 1) * d].iter_mut().zip(row) {
                        *xv += nv;
                    }
                }
            }
        }
        if let Some(pos) = &self.pos_embed {
            for i in 0..t {
                for (xv, pv) in x[i * d..(i + 1) * d].iter_mut().zip(pos.row(i)) {
                    *xv += pv;
                }
            }
        }
        Ok(x)
    }

    fn apply_norm(&self, norm: &Norm, x: &[f32], out: &mut [f32]) {
        let d = self.config.d_model;
        let eps = self.config.norm_eps;
        for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
            match self.config.norm_kind {
                NormKind::LayerNorm => {
                    tensor::layer_norm_into(xr, &norm.gain, norm.bias.as_deref(), eps, or)
                }
                NormKind::RmsNorm => tensor::rms_norm_into(xr, &norm.gain, eps, or),
            }
        }
    }

    fn rotary(&self, x: &mut [f32], t: usize) {
        let d = self.config.d_model;
        let dh = self.config.d_head;
        let half = dh / 2;
        let theta = self.config.rope_theta as f64;
        for pos in 0..t {
            for h in 0..self.config.n_heads {
                let base = pos * d + h * dh;
                for j in 0..half {
                    let freq = theta.powf(-(2.0 * j as f64) / dh as f64);
                    let angle = pos as f64 * freq;
                    let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
                    let a = x[base + j];
                    let b = x[base + j + half];
                    x[base + j] = a * cos - b * sin;
                    x[base + j + half] = b * cos + a * sin;
                }
            }
        }
    }

    /// Multi-head causal attention on `normed` `[T][d]`. Writes `[T][d]` into `out`.
    fn attention(
        &self,
        layer: &Layer,
        normed: &[f32],
        t: usize,
        knockout: Option<(usize, &[bool])>,
        scratch: LayerScratch<'_>,
        out: &mut [f32],
    ) -> Result<()> {
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let dh = self.config.d_head;
        let mut q = vec![0.0f32; t * d];
        let mut k = vec![0.0f32; t * d];
        let mut v = vec![0.0f32; t * d];
        layer.q.apply(normed, t, &mut q);
        layer.k.apply(normed, t, &mut k);
        layer.v.apply(normed, t, &mut v);
        if self.config.pos_kind == PosKind::Rotary {
            self.rotary(&mut q, t);
            self.rotary(&mut k, t);
        }
        let scale = 1.0 / (dh as f32).sqrt();
        let mut ctx = vec![0.0f32; t * d];
        let mut row = vec![0.0f32; t];
        let mut mask = vec![false; t];
        let LayerScratch {
            mut scores,
            mut probs,
        } = scratch;
        for h in 0..nh {
            for i in 0..t {
                let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..t {
                    if j <= i {
                        let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
                        row[j] = tensor::dot(qi, kj) * scale;
                        mask[j] = false;
                    } else {
                        row[j] = f32::NEG_INFINITY;
                        mask[j] = true;
                    }
                }
                let o = (h * t + i) * t;
                if let Some(s) = scores.as_deref_mut() {
                    s[o..o + t].copy_from_slice(&row);
                }
                if let Some((qpos, keys)) = knockout {
                    if qpos == i {
                        for j in 0..=i {
                            mask[j] |= keys[j];
                        }
                    }
                }
                tensor::softmax_masked_in_place(&mut row, &mask)?;
                if let Some(p) = probs.as_deref_mut() {
                    p[o..o + t].copy_from_slice(&row);
                }
                let ci = &mut ctx[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &w) in row.iter().enumerate().take(i + 1) {
                    let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
                    for (c, &vv) in ci.iter_mut().zip(vj) {
                        *c += w * vv;
                    }
                }
            }
        }
        layer.o.apply(&ctx, t, out);
        Ok(())
    }

    fn mlp(&self, layer: &Layer, normed: &[f32], t: usize, out: &mut [f32]) {
        let ff = layer.up.n_out;
        let mut hidden = vec![0.0f32; t * ff];
        layer.up.apply(normed, t, &mut hidden);
        let act = match self.config.activation {
            Activation::Gelu => tensor::gelu,
            Activation::Silu => tensor::silu,
        };
        match &layer.gate {
            Some(gate) => {
                let mut g = vec![0.0f32; t * ff];
                gate.apply(normed, t, &mut g);
                for (h, gv) in hidden.iter_mut().zip(&g) {
                    *h *= act(*gv);
                }
            }
            None => {
                for h in hidden.iter_mut() {
                    *h = act(*h);
                }
            }
        }
        layer.down.apply(&hidden, t, out);
    }

    /// Logits for a single residual vector: final norm, then unembedding.
    pub fn project_to_vocab(&self, h: &[f32]) -> Vec<f32> {
        let d = self.config.d_model;
        let mut normed = vec![0.0f32; d];
        self.apply_norm(&self.final_norm, h, &mut normed);
        let bias = self.unembed_bias();
        (0..self.config.vocab_size)
            .map(|v| {
                let mut logit = tensor::dot(&normed, self.unembed_row(v));
                if let Some(b) = bias {
                    logit += b[v];
                }
                logit
            })
            .collect()
    }

    fn knockout_keys(&self, mask: &AttentionMask, t: usize) -> Result<Vec<bool>> {
        if mask.query_position >= t {
            return Err(Error::OutOfRange(format!(
                "knockout query position {} for {t} tokens",
                mask.query_position
            )));
        }
        if let Some(&l) = mask.layers.iter().find(|&&l| l >= self.config.n_layers) {
            return Err(Error::OutOfRange(format!("knockout layer {l}")));
        }
        let mut keys = vec![false; t];
        for &k in &mask.masked_keys {
            if k >= t {
                return Err(Error::OutOfRange(format!("masked key {k} for {t} tokens")));
            }
            keys[k] = true;
        }
        if keys[..=mask.query_position].iter().all(|&m| m) {
            return Err(Error::AllMasked);
        }
        Ok(keys)
    }

    /// Run layers `start..L` on residual `x` (`[T][d]`, the input of layer
    /// `start`). Returns the last position's final-layer residual.
    fn run_layers(
        &self,
        start: usize,
        mut x: Vec<f32>,
        t: usize,
        intervention: &Intervention,
        clean: Option<&ActivationTrace>,
        mut rec: Option<&mut Recorder>,
    ) -> Result<Vec<f32>> {
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let knock = match &intervention.attention_mask {
            Some(m) => Some((m, self.knockout_keys(m, t)?)),
            None => None,
        };
        let mut normed = vec![0.0f32; t * d];
        let mut attn = vec![0.0f32; t * d];
        let mut mlp = vec![0.0f32; t * d];
        for l in start..self.config.n_layers {
            let layer = &self.layers[l];
            let lo = l * t * d;
            if let Some(r) = rec.as_deref_mut() {
                r.r0[lo..lo + t * d].copy_from_slice(&x);
            }
            self.apply_norm(&layer.attn_norm, &x, &mut normed);
            let knockout = knock
                .as_ref()
                .filter(|(m, _)| m.layers.contains(&l))
                .map(|(m, keys)| (m.query_position, keys.as_slice()));
            let ao = l * nh * t * t;
            let scratch = match rec.as_deref_mut() {
                Some(r) => LayerScratch {
                    scores: Some(&mut r.attn_scores[ao..ao + nh * t * t]),
                    probs: Some(&mut r.attn_probs[ao..ao + nh * t * t]),
                },
                None => LayerScratch {
                    scores: None,
                    probs: None,
                },
            };
            self.attention(layer, &normed, t, knockout, scratch, &mut attn)?;
            // R1 = A + R0
            for (xv, av) in x.iter_mut().zip(&attn) {
                *xv += av;
            }
            if let Some(r) = rec.as_deref_mut() {
                r.attn_out[lo..lo + t * d].copy_from_slice(&attn);
                r.r1[lo..lo + t * d].copy_from_slice(&x);
            }
            self.apply_norm(&layer.mlp_norm, &x, &mut normed);
            self.mlp(layer, &normed, t, &mut mlp);
            // R2 = M + R1
            for (xv, mv) in x.iter_mut().zip(&mlp) {
                *xv += mv;
            }
            for cell in intervention.restore.iter().filter(|c| c.layer == l) {
                let clean = clean.ok_or_else(|| {
                    Error::Invalid("restoration requested without a clean trace".into())
                })?;
                x[cell.position * d..(cell.position + 1) * d]
                    .copy_from_slice(clean.state(Site::R2, l, cell.position));
            }
            if !all_finite(&x) {
                return Err(Error::NonFinite(format!("layer {l}")));
            }
            if let Some(r) = rec.as_deref_mut() {
                r.mlp_out[lo..lo + t * d].copy_from_slice(&mlp);
                r.r2[lo..lo + t * d].copy_from_slice(&x);
            }
        }
        Ok(x[(t - 1) * d..t * d].to_vec())
    }

    fn check_restore(
        &self,
        intervention: &Intervention,
        clean: Option<&ActivationTrace>,
        t: usize,
    ) -> Result<()> {
        if intervention.restore.is_empty() {
            return Ok(());
        }
        let clean = clean
            .ok_or_else(|| Error::Invalid("restoration requested without a clean trace".into()))?;
        if clean.seq_len != t || clean.n_layers != self.config.n_layers {
            return Err(Error::Invalid("clean trace does not match this prompt".into()));
        }
        for c in &intervention.restore {
            if c.position >= t || c.layer >= self.config.n_layers {
                return Err(Error::OutOfRange(format!(
                    "restore cell (position {}, layer {})",
                    c.position, c.layer
                )));
            }
        }
        Ok(())
    }

    fn finish_logits(&self, last: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        let logits = self.project_to_vocab(last);
        if !all_finite(&logits) {
            return Err(Error::NonFinite("final logits".into()));
        }
        let logprobs = tensor::log_softmax(&logits);
        Ok((logits, logprobs))
    }

    /// Full instrumented forward pass.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        intervention: &Intervention,
        clean: Option<&ActivationTrace>,
    ) -> Result<ActivationTrace> {
        let t = tokens.len();
        let d = self.config.d_model;
        let l = self.config.n_layers;
        let nh = self.config.n_heads;
        self.check_restore(intervention, clean, t)?;
        let x = self.embed(tokens, intervention.embedding_noise.as_ref())?;
        let mut rec = Recorder {
            r0: vec![0.0; l * t * d],
            attn_out: vec![0.0; l * t * d],
            r1: vec![0.0; l * t * d],
            mlp_out: vec![0.0; l * t * d],
            r2: vec![0.0; l * t * d],
            attn_scores: vec![0.0; l * nh * t * t],
            attn_probs: vec![0.0; l * nh * t * t],
        };
        let last = self.run_layers(0, x, t, intervention, clean, Some(&mut rec))?;
        let (final_logits, final_logprobs) = self.finish_logits(&last)?;
        Ok(ActivationTrace {
            n_layers: l,
            seq_len: t,
            d_model: d,
            n_heads: nh,
            r0: rec.r0,
            attn_out: rec.attn_out,
            r1: rec.r1,
            mlp_out: rec.mlp_out,
            r2: rec.r2,
            attn_scores: rec.attn_scores,
            attn_probs: rec.attn_probs,
            final_logits,
            final_logprobs,
        })
    }

    /// Forward pass that only returns final-position logits.
    pub fn forward_logits(
        &self,
        tokens: &[TokenId],
        intervention: &Intervention,
        clean: Option<&ActivationTrace>,
    ) -> Result<Vec<f32>> {
        let t = tokens.len();
        self.check_restore(intervention, clean, t)?;
        let x = self.embed(tokens, intervention.embedding_noise.as_ref())?;
        let last = self.run_layers(0, x, t, intervention, clean, None)?;
        Ok(self.finish_logits(&last)?.0)
    }

    /// Continue a pass from the output of layer `after_layer`.
    ///
    /// `residual` is `R2[.., after_layer]` for every position (`[T][d]`).
    /// Equivalent, bit for bit, to a full pass whose first `after_layer + 1`
    /// layers produced `residual`.
    pub fn resume_logits(&self, after_layer: usize, residual: Vec<f32>) -> Result<Vec<f32>> {
        let d = self.config.d_model;
        if after_layer >= self.config.n_layers || !residual.len().is_multiple_of(d) || residual.is_empty() {
            return Err(Error::Invalid("bad resume point".into()));
        }
        let t = residual.len() / d;
        let last = self.run_layers(after_layer + 1, residual, t, &Intervention::none(), None, None)?;
        Ok(self.finish_logits(&last)?.0)
    }
}
