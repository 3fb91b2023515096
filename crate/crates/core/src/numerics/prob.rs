use serde::{Deserialize, Serialize};

use super::{NumericsError, Result};

/// Probability vector over K classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    probs: Vec<f64>,
}

const SUM_TOL: f64 = 1e-12;

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(NumericsError::InvalidDistribution("empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(NumericsError::InvalidDistribution(format!(
                "entries must be finite and nonnegative: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(NumericsError::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k > 0);
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn one_hot(k: usize, idx: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[idx] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, idx: usize) -> f64 {
        self.probs[idx]
    }

    /// Most probable class; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Gap between the two largest probabilities (0 for a single class).
    pub fn top2_margin(&self) -> f64 {
        let mut first = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for &p in &self.probs {
            if p > first {
                second = first;
                first = p;
            } else if p > second {
                second = p;
            }
        }
        if second.is_finite() {
            first - second
        } else {
            0.0
        }
    }
}

/// `softmax(z / tau)` with max subtraction.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Distribution> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(NumericsError::BadTemperature(tau));
    }
    if logits.is_empty() {
        return Err(NumericsError::InvalidDistribution("empty logits".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(NumericsError::NonFinite("softmax_temp logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|z| ((z - max) / tau).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    Ok(Distribution { probs })
}

/// Log-probabilities `ln softmax(z / tau)`, stable for very negative entries.
pub fn log_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(NumericsError::BadTemperature(tau));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| ((z - max) / tau).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|z| (z - max) / tau - lse).collect())
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &Distribution) -> f64 {
    let h: f64 = p
        .probs
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| -q * q.ln())
        .sum();
    h.max(0.0)
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(NumericsError::LengthMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(NumericsError::ZeroNorm);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}
