//! Elementary numeric operations shared by the whole pipeline:
//! activations, softened distributions, entropy, divergences.
//!
//! Everything here is pure, stateless and `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A discrete probability distribution: nonnegative entries summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(pub Vec<f64>);

impl ProbVector {
    /// Wraps `values` after checking nonnegativity and normalization
    /// (sum within 1e-9 of 1).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidProbVector("empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidProbVector(format!("negative or non-finite entry {v}")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidProbVector(format!("sum {sum} not within 1e-9 of 1")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Raw pre-activation scores. All entries must be finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(pub Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidProbVector(format!("non-finite logit {v}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Logistic sigmoid, saturating without overflow at the extremes.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Temperature-scaled softmax with max-subtraction for stability.
///
/// Element `i` equals `exp(z_i/T) / sum_j exp(z_j/T)`.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    debug_assert!(temperature > 0.0, "temperature must be positive");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(ProbVector(out))
}

/// Shannon entropy in bits. Zero-probability terms contribute 0.
pub fn entropy_bits(p: &ProbVector) -> f64 {
    p.values()
        .iter()
        .map(|&pi| if pi > 0.0 { -pi * pi.log2() } else { 0.0 })
        .sum()
}

/// Kullback-Leibler divergence `sum_i p_i ln(p_i / q_i)` in nats.
///
/// `q_i == 0` is only allowed where `p_i == 0`.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch { left: p.len(), right: q.len() });
    }
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.values().iter().zip(q.values()).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::DivergentSupport { index: i });
            }
            acc += pi * (pi / qi).ln();
        }
    }
    Ok(acc)
}

/// Sum of absolute elementwise differences.
pub fn l1_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

/// Pairwise (cascade) summation. Order-stable accumulation so that large
/// reductions agree across chunked evaluation orders to ~1e-12.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean via pairwise summation; 0 for an empty slice.
pub fn pairwise_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        pairwise_sum(xs) / xs.len() as f64
    }
}
