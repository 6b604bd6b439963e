//! Flat-vector numerics, deterministic randomness, and the stable
//! probability primitives everything else builds on.
//!
//! All arithmetic is f64. The second-order residual measurements in
//! [`crate::taylor`] sit near the f64 noise floor, so nothing here may
//! silently drop to lower precision.

use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ── ParamVec ─────────────────────────────────────────────────────────

/// Flat vector of all parameters of one model.
///
/// Entries are finite by construction; every public operation that produces
/// a `ParamVec` re-validates finiteness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVec {
    values: Vec<f64>,
}

impl ParamVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                quantity: "parameter".into(),
                location: format!("entry {i}"),
            });
        }
        Ok(ParamVec { values })
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVec {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Sum of all entries.
    pub fn entry_sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self - other`, entrywise.
    pub fn sub(&self, other: &ParamVec) -> Result<ParamVec> {
        if self.dim() != other.dim() {
            return Err(Error::DimMismatch {
                index: 0,
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        ParamVec::new(values)
    }

    /// `self + scale * dir`, entrywise.
    pub fn add_scaled(&self, scale: f64, dir: &ParamVec) -> Result<ParamVec> {
        if self.dim() != dir.dim() {
            return Err(Error::DimMismatch {
                index: 0,
                expected: self.dim(),
                got: dir.dim(),
            });
        }
        let values = self
            .values
            .iter()
            .zip(&dir.values)
            .map(|(a, d)| a + scale * d)
            .collect();
        ParamVec::new(values)
    }

    /// `self * scale`, entrywise.
    pub fn scale(&self, scale: f64) -> Result<ParamVec> {
        ParamVec::new(self.values.iter().map(|v| v * scale).collect())
    }
}

/// `result[i] = sum_t weights[t] * vecs[t][i]`.
///
/// Accepts arbitrary weights (not only simplex vectors); callers that need
/// a convex combination enforce that themselves.
pub fn weighted_sum(vecs: &[ParamVec], weights: &[f64]) -> Result<ParamVec> {
    if vecs.is_empty() {
        return Err(Error::Empty("weighted_sum requires at least one vector"));
    }
    if vecs.len() != weights.len() {
        return Err(Error::DimMismatch {
            index: 0,
            expected: vecs.len(),
            got: weights.len(),
        });
    }
    let dim = vecs[0].dim();
    for (t, v) in vecs.iter().enumerate() {
        if v.dim() != dim {
            return Err(Error::DimMismatch {
                index: t,
                expected: dim,
                got: v.dim(),
            });
        }
    }
    let mut out = vec![0.0; dim];
    for (v, &w) in vecs.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(&v.values) {
            *o += w * x;
        }
    }
    ParamVec::new(out)
}

// ── Probability primitives ───────────────────────────────────────────

/// Max-shifted softmax. Entries are positive and sum to 1 within 1e-12.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax requires at least one logit"));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            quantity: "logit".into(),
            location: format!("entry {i}"),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Shannon entropy in nats, with the convention `0 * ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Empty("entropy requires at least one entry"));
    }
    if let Some(i) = p.iter().position(|&v| v < 0.0) {
        return Err(Error::InvalidValue(format!(
            "entropy requires nonnegative entries, got {} at {}",
            p[i], i
        )));
    }
    Ok(p.iter()
        .map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 })
        .sum())
}

/// Population standard deviation (divide by N).
pub fn population_std(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "population_std requires at least one value");
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt()
}

// ── Deterministic randomness ─────────────────────────────────────────

/// Deterministic counter-based random stream.
///
/// Backed by ChaCha8: identical seed + identical call sequence produces a
/// bit-identical stream on every platform. Single-owner: never share one
/// instance across workers; derive child seeds instead.
pub struct Rng {
    inner: rand_chacha::ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index requires n > 0");
        // Rejection-free scaling is fine here: n is tiny relative to 2^53.
        (self.next_f64() * n as f64) as usize
    }

    /// Standard normal via Box-Muller, so the stream stays portable.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64], std: f64) {
        for v in out.iter_mut() {
            *v = self.next_normal() * std;
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_index(i + 1);
            xs.swap(i, j);
        }
    }
}
