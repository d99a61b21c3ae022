// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pointwise mutual information between contexts and their context-based
//! candidates, and a one-sample t-test of the PMI mean against zero.
//!
//! An experiment is a rectangular answer grid: `answers[c][q]` is the C+Q
//! top-1 answer for context `c` paired with query `q`. Each context carries
//! at most one designated candidate. With `n` contexts and `N` answers,
//!
//! ```text
//! PMI(c, a) = ln( (joint(c, a) / N) / ((1 / n) * (count(a) / N)) )
//! ```
//!
//! Pairs whose joint count is zero have no PMI and are excluded.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the designated candidate of a context is picked from its queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignatedRule {
    /// Most frequent context-based candidate across the context's queries.
    /// Ties go to the lexicographically smallest string.
    #[default]
    Modal,
    /// Top context-based candidate of the first query.
    FirstQuery,
}

/// One grid cell as produced by a C+Q run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAnswer {
    pub answer: String,
    /// Context-based candidates, best first.
    pub c_cand: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmiExperiment {
    pub class_label: String,
    pub n_contexts: usize,
    pub n_queries_per_context: usize,
    answers: Vec<Vec<String>>,
    designated: Vec<Option<String>>,
    /// `(context index, candidate)` for every context with a designated candidate.
    pub pairs: Vec<(usize, String)>,
    pub answer_counts: BTreeMap<String, u64>,
    pub joint_counts: BTreeMap<(usize, String), u64>,
}

impl PmiExperiment {
    /// Build from an answer grid and one optional designated candidate per context.
    pub fn new(
        class_label: impl Into<String>,
        answers: Vec<Vec<String>>,
        designated: Vec<Option<String>>,
    ) -> Result<Self> {
        let n_contexts = answers.len();
        if n_contexts == 0 {
            return Err(Error::Invalid("PMI experiment needs at least one context".into()));
        }
        if designated.len() != n_contexts {
            return Err(Error::Shape(format!(
                "{} designated candidates for {n_contexts} contexts",
                designated.len()
            )));
        }
        let n_q = answers[0].len();
        if n_q == 0 || answers.iter().any(|row| row.len() != n_q) {
            return Err(Error::Shape("answer grid must be rectangular and non-empty".into()));
        }
        let mut answer_counts = BTreeMap::new();
        let mut joint_counts = BTreeMap::new();
        for (c, row) in answers.iter().enumerate() {
            for a in row {
                *answer_counts.entry(a.clone()).or_insert(0) += 1;
                *joint_counts.entry((c, a.clone())).or_insert(0) += 1;
            }
        }
        let pairs = designated
            .iter()
            .enumerate()
            .filter_map(|(c, d)| d.clone().map(|d| (c, d)))
            .collect();
        Ok(Self {
            class_label: class_label.into(),
            n_contexts,
            n_queries_per_context: n_q,
            answers,
            designated,
            pairs,
            answer_counts,
            joint_counts,
        })
    }

    pub fn total(&self) -> u64 {
        (self.n_contexts * self.n_queries_per_context) as u64
    }

    pub fn answers(&self) -> &[Vec<String>] {
        &self.answers
    }

    /// PMI of pair `i`, or `None` when its joint count is zero.
    pub fn pmi(&self, i: usize) -> Option<f64> {
        let (c, cand) = &self.pairs[i];
        let joint = *self.joint_counts.get(&(*c, cand.clone()))?;
        let count = self.answer_counts[cand];
        let total = self.total() as f64;
        let p_joint = joint as f64 / total;
        let p_ctx = 1.0 / self.n_contexts as f64;
        let p_cand = count as f64 / total;
        Some((p_joint / (p_ctx * p_cand)).ln())
    }

    /// Defined PMI values in pair order, and the number of excluded pairs.
    pub fn pmi_values(&self) -> (Vec<f64>, usize) {
        let mut values = Vec::with_capacity(self.pairs.len());
        let mut excluded = 0;
        for i in 0..self.pairs.len() {
            match self.pmi(i) {
                Some(v) => values.push(v),
                None => excluded += 1,
            }
        }
        (values, excluded)
    }

    /// Reassign all answers to contexts uniformly at random, keeping the
    /// designated candidates and the grid shape.
    pub fn shuffled(&self, seed: u64) -> Self {
        let mut flat: Vec<String> = self.answers.iter().flatten().cloned().collect();
        flat.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let answers = flat
            .chunks(self.n_queries_per_context)
            .map(|c| c.to_vec())
            .collect();
        Self::new(self.class_label.clone(), answers, self.designated.clone())
            .expect("shape preserved")
    }
}

/// Assemble an experiment from per-context rows of C+Q results.
/// Contexts with no context-based candidate in any query get no pair;
/// their indices are returned.
pub fn build_pmi_experiment(
    class_label: impl Into<String>,
    grid: &[Vec<GridAnswer>],
    rule: DesignatedRule,
) -> Result<(PmiExperiment, Vec<usize>)> {
    let mut designated = Vec::with_capacity(grid.len());
    let mut without = Vec::new();
    for (c, row) in grid.iter().enumerate() {
        let pick = match rule {
            DesignatedRule::FirstQuery => row.first().and_then(|r| r.c_cand.first().cloned()),
            DesignatedRule::Modal => {
                let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
                for r in row {
                    if let Some(top) = r.c_cand.first() {
                        *freq.entry(top).or_default() += 1;
                    }
                }
                let mut best: Option<(&str, usize)> = None;
                for (s, n) in freq {
                    if best.is_none_or(|(_, m)| n > m) {
                        best = Some((s, n));
                    }
                }
                best.map(|(s, _)| s.to_string())
            }
        };
        if pick.is_none() {
            without.push(c);
        }
        designated.push(pick);
    }
    let answers = grid
        .iter()
        .map(|row| row.iter().map(|r| r.answer.clone()).collect())
        .collect();
    Ok((PmiExperiment::new(class_label, answers, designated)?, without))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean: f64,
    /// Infinite when `degenerate`.
    pub t_stat: f64,
    pub p_value: f64,
    /// Zero sample variance with a nonzero mean.
    pub degenerate: bool,
}

/// Two-sided one-sample t-test of `values` against mean zero.
pub fn one_sample_ttest(values: &[f64]) -> Result<TTest> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Invalid(format!("t-test needs at least 2 values, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-test input".into()));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { n, mean, t_stat: 0.0, p_value: 1.0, degenerate: false }
        } else {
            TTest { n, mean, t_stat: mean.signum() * f64::INFINITY, p_value: 0.0, degenerate: true }
        });
    }
    let t = mean / (var.sqrt() / nf.sqrt());
    Ok(TTest {
        n,
        mean,
        t_stat: t,
        p_value: student_t_two_sided(t, nf - 1.0),
        degenerate: false,
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `I_x(a, b)` by Lentz's continued fraction, using the symmetry
/// `I_x(a, b) = 1 - I_{1-x}(b, a)` where it converges faster.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        for coef in [even, -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))] {
            d = 1.0 + coef * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + coef / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// One report row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmiReport {
    pub class: String,
    pub n_pairs: usize,
    pub mean_pmi: f64,
    /// `None` when the statistic is infinite (degenerate sample).
    pub t: Option<f64>,
    pub p: f64,
    pub excluded_pairs: usize,
    pub degenerate: bool,
}

pub fn mean_pmi_and_ttest(exp: &PmiExperiment) -> Result<PmiReport> {
    let (values, excluded) = exp.pmi_values();
    let test = one_sample_ttest(&values)?;
    Ok(PmiReport {
        class: exp.class_label.clone(),
        n_pairs: values.len(),
        mean_pmi: test.mean,
        t: test.t_stat.is_finite().then_some(test.t_stat),
        p: test.p_value,
        excluded_pairs: excluded,
        degenerate: test.degenerate,
    })
}
