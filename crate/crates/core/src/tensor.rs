// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense f32 kernels used by the model engine.
//!
//! Every reduction walks its inputs in a fixed order (ascending index) so
//! results are bit-reproducible across runs and threads. No kernel
//! reassociates sums.

use crate::error::{Error, Result};

/// Row-major dense tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn all_finite(&self) -> bool {
        all_finite(&self.data)
    }
}

pub fn all_finite(xs: &[f32]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {m}x{k} times {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    let t = Tensor::new(vec![m, n], out)?;
    if !t.all_finite() {
        return Err(Error::NonFinite("matmul".into()));
    }
    Ok(t)
}

/// Slice-level product used on the hot path. `out` is overwritten.
///
/// Each output element accumulates `a[i,k] * b[k,j]` for k = 0, 1, ... in
/// that order, starting from 0.0.
pub fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[j] = sum_k x[k] * w[k, j]` for a single row vector.
pub fn vecmat_into(x: &[f32], w: &[f32], out: &mut [f32]) {
    matmul_into(x, w, out, 1, x.len(), out.len());
}

/// Dot product with ascending accumulation order.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Softmax over `x`, excluding `masked` positions.
///
/// Masked entries receive exactly 0. The remaining entries are normalized
/// over the unmasked support only.
pub fn softmax(x: &Tensor, masked: Option<&[usize]>) -> Result<Tensor> {
    let mut out = x.data.clone();
    let mut mask = vec![false; out.len()];
    if let Some(idx) = masked {
        for &i in idx {
            if i >= out.len() {
                return Err(Error::OutOfRange(format!(
                    "masked index {i} for length {}",
                    out.len()
                )));
            }
            mask[i] = true;
        }
    }
    softmax_masked_in_place(&mut out, &mask)?;
    Tensor::new(x.shape.clone(), out)
}

/// In-place masked softmax. `mask[i] == true` excludes entry `i`.
pub fn softmax_masked_in_place(x: &mut [f32], mask: &[bool]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    let mut max = f32::NEG_INFINITY;
    for (v, &m) in x.iter().zip(mask) {
        if !m && *v > max {
            max = *v;
        }
    }
    if max == f32::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut sum = 0.0f32;
    for (v, &m) in x.iter_mut().zip(mask) {
        if m {
            *v = 0.0;
        } else {
            *v = (*v - max).exp();
            sum += *v;
        }
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
    if !all_finite(x) {
        return Err(Error::NonFinite("softmax".into()));
    }
    Ok(())
}

/// Unmasked in-place softmax.
pub fn softmax_in_place(x: &mut [f32]) -> Result<()> {
    let mask = vec![false; x.len()];
    softmax_masked_in_place(x, &mask)
}

/// Log-softmax computed in f64 and rounded back to f32.
pub fn log_softmax(x: &[f32]) -> Vec<f32> {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0.0f64;
    for &v in x {
        sum += (v as f64 - max).exp();
    }
    let lse = max + sum.ln();
    x.iter().map(|&v| (v as f64 - lse) as f32).collect()
}

/// LayerNorm: `(x - mean) / sqrt(var + eps) * gain + bias` with population variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    check_norm_args(x, gain, eps)?;
    if bias.len() != x.len() {
        return Err(Error::Shape("layer_norm bias length differs from input".into()));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_into(&x.data, &gain.data, Some(&bias.data), eps, &mut out);
    Tensor::new(x.shape.clone(), out)
}

/// RMSNorm: `x / sqrt(mean(x^2) + eps) * gain`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    check_norm_args(x, gain, eps)?;
    let mut out = vec![0.0; x.len()];
    rms_norm_into(&x.data, &gain.data, eps, &mut out);
    Tensor::new(x.shape.clone(), out)
}

fn check_norm_args(x: &Tensor, gain: &Tensor, eps: f32) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Shape("norm of an empty vector".into()));
    }
    if gain.len() != x.len() {
        return Err(Error::Shape("norm gain length differs from input".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("norm eps must be positive, got {eps}")));
    }
    Ok(())
}

pub fn layer_norm_into(x: &[f32], gain: &[f32], bias: Option<&[f32]>, eps: f32, out: &mut [f32]) {
    let n = x.len() as f32;
    let mut sum = 0.0f32;
    for &v in x {
        sum += v;
    }
    let mean = sum / n;
    let mut sq = 0.0f32;
    for &v in x {
        let c = v - mean;
        sq += c * c;
    }
    let inv = 1.0 / (sq / n + eps).sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        let mut v = (x[i] - mean) * inv * gain[i];
        if let Some(b) = bias {
            v += b[i];
        }
        *o = v;
    }
}

pub fn rms_norm_into(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let mut sq = 0.0f32;
    for &v in x {
        sq += v * v;
    }
    let inv = 1.0 / (sq / x.len() as f32 + eps).sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        *o = x[i] * inv * gain[i];
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(r: usize, c: usize, v: &[f32]) -> Tensor {
        Tensor::new(vec![r, c], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let out = matmul(&Tensor::identity(2), &t2(2, 2, &[3.0, 4.0, 5.0, 6.0])).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_scalar() {
        let out = matmul(&t2(1, 1, &[2.0]), &t2(1, 1, &[3.0])).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = matmul(&t2(3, 4, &a), &t2(4, 2, &b)).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0f32;
                for k in 0..4 {
                    acc += a[i * 4 + k] * b[k * 2 + j];
                }
                assert_eq!(out.data()[i * 2 + j], acc);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        assert!(matches!(
            matmul(&t2(2, 3, &[0.0; 6]), &t2(2, 3, &[0.0; 6])),
            Err(Error::Shape(_))
        ));
        assert!(matmul(&Tensor::from_vec(vec![1.0]), &t2(1, 1, &[1.0])).is_err());
    }

    #[test]
    fn softmax_uniform() {
        let out = softmax(&Tensor::from_vec(vec![0.0; 3]), None).unwrap();
        for v in out.data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn softmax_masked_max() {
        let out = softmax(&Tensor::from_vec(vec![5.0, 1.0, 1.0]), Some(&[0])).unwrap();
        assert_eq!(out.data()[0], 0.0);
        assert_abs_diff_eq!(out.data()[1], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(out.data()[2], 0.5, epsilon = 1e-7);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let out = softmax(&Tensor::from_vec(vec![1.0, 2.0, 3.0]), None).unwrap();
        let z: f64 = (1..=3).map(|v| (v as f64).exp()).sum();
        for (i, v) in out.data().iter().enumerate() {
            let want = ((i + 1) as f64).exp() / z;
            assert!((*v as f64 - want).abs() < 1e-7, "{v} vs {want}");
        }
    }

    #[test]
    fn softmax_all_masked_is_error() {
        let r = softmax(&Tensor::from_vec(vec![1.0, 2.0]), Some(&[0, 1]));
        assert!(matches!(r, Err(Error::AllMasked)));
    }

    #[test]
    fn layer_norm_constant_vector() {
        let x = Tensor::from_vec(vec![1.0; 4]);
        let out = layer_norm(
            &x,
            &Tensor::from_vec(vec![1.0; 4]),
            &Tensor::from_vec(vec![0.0; 4]),
            1e-5,
        )
        .unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn layer_norm_unit_input() {
        let out = layer_norm(
            &Tensor::from_vec(vec![1.0, -1.0]),
            &Tensor::from_vec(vec![1.0, 1.0]),
            &Tensor::from_vec(vec![0.0, 0.0]),
            1e-12,
        )
        .unwrap();
        assert_abs_diff_eq!(out.data()[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(out.data()[1], -1.0, epsilon = 1e-6);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f32> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g: Vec<f32> = (0..8).map(|_| rng.random_range(0.5..1.5)).collect();
        let b: Vec<f32> = (0..8).map(|_| rng.random_range(-0.5..0.5)).collect();
        let eps = 1e-5;
        let out = layer_norm(
            &Tensor::from_vec(x.clone()),
            &Tensor::from_vec(g.clone()),
            &Tensor::from_vec(b.clone()),
            eps,
        )
        .unwrap();
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 8.0;
        for i in 0..8 {
            let want = (x[i] as f64 - mean) / (var + eps as f64).sqrt() * g[i] as f64 + b[i] as f64;
            assert!((out.data()[i] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_matches_formula() {
        let x = vec![1.0f32, 2.0, -2.0, 0.5];
        let out = rms_norm(&Tensor::from_vec(x.clone()), &Tensor::from_vec(vec![2.0; 4]), 1e-6)
            .unwrap();
        let ms = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 4.0;
        for (&xi, &oi) in x.iter().zip(out.data()) {
            let want = xi as f64 / (ms + 1e-6).sqrt() * 2.0;
            assert!((oi as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn activations() {
        assert_eq!(gelu(0.0), 0.0);
        assert_abs_diff_eq!(gelu(1.0), 0.841_192, epsilon = 1e-5);
        assert_abs_diff_eq!(silu(1.0), 0.731_058_6, epsilon = 1e-6);
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(
            xs in proptest::collection::vec(-30.0f32..30.0, 1..40),
            mask_bits in proptest::collection::vec(any::<bool>(), 40),
        ) {
            let mut mask: Vec<bool> = mask_bits[..xs.len()].to_vec();
            if mask.iter().all(|&m| m) {
                mask[0] = false;
            }
            let mut v = xs.clone();
            softmax_masked_in_place(&mut v, &mask).unwrap();
            let sum: f32 = v.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            for (p, m) in v.iter().zip(&mask) {
                prop_assert!(*p >= 0.0);
                if *m { prop_assert_eq!(*p, 0.0); }
            }
        }

        #[test]
        fn identity_times_a_is_a(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f32> = (0..r * c).map(|_| rng.random_range(-5.0..5.0)).collect();
            let a = t2(r, c, &a);
            prop_assert_eq!(matmul(&Tensor::identity(r), &a).unwrap(), a);
        }
    }
}
