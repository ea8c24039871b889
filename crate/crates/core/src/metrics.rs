//! Metrics over weight deltas.
//!
//! A fine-tune is judged by its delta against the base model: for base
//! weights `B`, fine-tuned weights `W` and a reconstruction `W_hat`, the
//! reference delta is `W - B` and the reconstructed delta is `W_hat - B`.
//! Because both deltas subtract the same base, MSE and L2 distance between
//! the deltas equal the same quantities between `W_hat` and `W` directly;
//! sign agreement and cosine similarity do depend on the base.
//!
//! Conventions, chosen so every metric is defined for every input:
//! - `sign(0) = 0`: a position where both deltas are zero counts as a
//!   match, a position where exactly one is zero counts as a mismatch.
//! - cosine similarity of two zero vectors is 1.0; of one zero vector
//!   against a nonzero one, 0.0.
//!
//! All three selectable metrics are oriented so that larger is better,
//! which is why MSE enters negated.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fmt;
use std::str::FromStr;

/// Objective used to score a candidate scale. Larger is always better.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    /// Negated mean squared error of the reconstruction.
    NegMse,
    /// Fraction of delta entries whose sign survives.
    SignRate,
    /// Cosine similarity between the flattened deltas.
    CosSim,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::NegMse => "mse",
            MetricKind::SignRate => "sign",
            MetricKind::CosSim => "cosine",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(MetricKind::NegMse),
            "sign" => Ok(MetricKind::SignRate),
            "cosine" => Ok(MetricKind::CosSim),
            _ => Err(Error::InvalidConfig(format!(
                "unknown metric {s:?}, expected mse, sign or cosine"
            ))),
        }
    }
}

/// A base tensor with its fine-tuned counterpart.
#[derive(Debug, Clone)]
pub struct LayerPair {
    pub name: String,
    pub base: Tensor,
    pub post: Tensor,
}

impl LayerPair {
    pub fn new(name: impl Into<String>, base: Tensor, post: Tensor) -> Result<Self> {
        if base.shape() != post.shape() {
            return Err(Error::Shape(format!(
                "base shape {:?} != fine-tuned shape {:?}",
                base.shape(),
                post.shape()
            )));
        }
        Ok(LayerPair {
            name: name.into(),
            base,
            post,
        })
    }

    /// Reference delta `post - base`.
    pub fn delta(&self) -> Vec<f64> {
        zip_sub(self.post.data(), self.base.data())
    }

    pub fn is_zero_delta(&self) -> bool {
        self.post
            .data()
            .iter()
            .zip(self.base.data())
            .all(|(p, b)| p - b == 0.0)
    }
}

/// Reference and reconstructed deltas for one layer.
#[derive(Debug, Clone)]
pub struct DeltaPair {
    /// `post - base`.
    pub reference: Vec<f64>,
    /// `w_hat - base`.
    pub reconstructed: Vec<f64>,
}

impl DeltaPair {
    pub fn new(pair: &LayerPair, w_hat: &Tensor) -> Result<Self> {
        if w_hat.shape() != pair.post.shape() {
            return Err(Error::Shape(format!(
                "reconstruction shape {:?} != layer shape {:?}",
                w_hat.shape(),
                pair.post.shape()
            )));
        }
        Ok(DeltaPair {
            reference: pair.delta(),
            reconstructed: zip_sub(w_hat.data(), pair.base.data()),
        })
    }
}

fn zip_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Mean squared difference. Sequential accumulation, so the result is
/// deterministic for a given input order.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// Euclidean distance between two flattened tensors.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Fraction of positions where the two deltas have the same sign, with
/// `sign(0) = 0`: both zero matches, exactly one zero mismatches.
pub fn sign_rate(reconstructed: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(reconstructed.len(), reference.len());
    if reference.is_empty() {
        return 1.0;
    }
    let matches = reconstructed
        .iter()
        .zip(reference)
        .filter(|(q, r)| sign(**q) == sign(**r))
        .count();
    matches as f64 / reference.len() as f64
}

/// Cosine similarity of two flattened vectors, with the zero-vector
/// conventions from the module docs.
pub fn cos_sim(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    cos_from_sums(dot, na, nb)
}

/// Assembles a cosine similarity from a dot product and the two squared
/// norms, applying the zero-vector conventions. Shared with the aggregate
/// report path so layer-level and run-level cosines degenerate identically.
///
/// The denominator is `sqrt(sq_a * sq_b)` rather than a product of square
/// roots: when the two vectors are identical the three sums coincide and
/// `x / sqrt(x * x)` is exactly 1.0 under round-to-nearest, so a perfect
/// reconstruction reports a cosine of exactly 1.
pub fn cos_from_sums(dot: f64, sq_a: f64, sq_b: f64) -> f64 {
    match (sq_a == 0.0, sq_b == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => {
            let denom = (sq_a * sq_b).sqrt();
            if denom.is_finite() && denom > 0.0 {
                dot / denom
            } else {
                // The product over- or underflowed; split the square root.
                dot / (sq_a.sqrt() * sq_b.sqrt())
            }
        }
    }
}

/// Scores a reconstruction under one metric. Higher is better for all
/// three kinds.
pub fn evaluate(kind: MetricKind, pair: &LayerPair, w_hat: &Tensor) -> Result<f64> {
    match kind {
        // MSE over deltas equals MSE over weights because the base
        // subtracts out; computing it on the weights skips two
        // subtractions per element.
        MetricKind::NegMse => {
            if w_hat.shape() != pair.post.shape() {
                return Err(Error::Shape(format!(
                    "reconstruction shape {:?} != layer shape {:?}",
                    w_hat.shape(),
                    pair.post.shape()
                )));
            }
            Ok(-mse(w_hat.data(), pair.post.data()))
        }
        MetricKind::SignRate => {
            let d = DeltaPair::new(pair, w_hat)?;
            Ok(sign_rate(&d.reconstructed, &d.reference))
        }
        MetricKind::CosSim => {
            let d = DeltaPair::new(pair, w_hat)?;
            Ok(cos_sim(&d.reconstructed, &d.reference))
        }
    }
}
