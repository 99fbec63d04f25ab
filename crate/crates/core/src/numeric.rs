//! Vector and distribution primitives shared by every other module.
//!
//! All arithmetic is `f64`. Softmax is evaluated with max-subtraction so that
//! temperatures as small as 0.07 cannot overflow at cosine similarity ±1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// A unit-L2-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Wraps values that the caller guarantees are already unit-norm
    /// (e.g. read back from a snapshot written by this crate).
    pub fn from_unit_unchecked(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A discrete probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDistribution(Vec<f64>);

impl ProbDistribution {
    /// Validates non-negativity and unit mass (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidConfig(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "probabilities sum to {mass}, not 1"
            )));
        }
        Ok(ProbDistribution(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Softmax temperatures of the five similarity losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureConfig {
    pub tau_pa: f64,
    pub tau_ia: f64,
    pub tau_c: f64,
    pub tau_ps: f64,
    pub tau_is: f64,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        TemperatureConfig {
            tau_pa: 0.5,
            tau_ia: 0.1,
            tau_c: 0.07,
            tau_ps: 0.1,
            tau_is: 0.2,
        }
    }
}

impl TemperatureConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("tau_pa", self.tau_pa),
            ("tau_ia", self.tau_ia),
            ("tau_c", self.tau_c),
            ("tau_ps", self.tau_ps),
            ("tau_is", self.tau_is),
        ];
        for (name, t) in all {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be strictly positive, got {t}"
                )));
            }
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn normalize(v: &[f64]) -> Result<FeatureVector> {
    let norm = l2_norm(v);
    if !norm.is_finite() || norm < MIN_NORM {
        return Err(Error::ZeroVector { norm });
    }
    Ok(FeatureVector(v.iter().map(|x| x / norm).collect()))
}

/// Numerically stable softmax of raw logits.
pub(crate) fn softmax_logits(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Natural-log softmax; `ln p_i` without forming `p_i` first.
pub(crate) fn log_softmax_logits(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub(crate) fn cosine_logits<K: AsRef<[f64]>>(q: &[f64], keys: &[K], tau: f64) -> Vec<f64> {
    keys.iter().map(|k| dot(q, k.as_ref()) / tau).collect()
}

/// `exp(q·k_pos/τ) / Σ_i exp(q·k_i/τ)`.
pub fn softmax_similarity(
    q: &FeatureVector,
    keys: &[FeatureVector],
    pos_index: usize,
    tau: f64,
) -> Result<f64> {
    if keys.is_empty() {
        return Err(Error::EmptyKeySet);
    }
    if pos_index >= keys.len() {
        return Err(Error::IndexOutOfRange {
            index: pos_index,
            len: keys.len(),
        });
    }
    let probs = softmax_logits(&cosine_logits(q.as_slice(), keys, tau));
    Ok(probs[pos_index])
}

pub fn softmax_distribution(
    q: &FeatureVector,
    keys: &[FeatureVector],
    tau: f64,
) -> Result<ProbDistribution> {
    if keys.is_empty() {
        return Err(Error::EmptyKeySet);
    }
    Ok(ProbDistribution(softmax_logits(&cosine_logits(
        q.as_slice(),
        keys,
        tau,
    ))))
}

/// `KL(p ‖ r)` in nats, with `0·ln(0/r) = 0`.
pub fn kl_divergence(p: &ProbDistribution, r: &ProbDistribution) -> Result<f64> {
    kl_raw(p.probs(), r.probs())
}

pub(crate) fn kl_raw(p: &[f64], r: &[f64]) -> Result<f64> {
    if p.len() != r.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: r.len(),
        });
    }
    let kl: f64 = p
        .iter()
        .zip(r)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, ri)| pi * (pi / ri).ln())
        .sum();
    // Rounding can leave a tiny negative residue when p ≈ r.
    Ok(kl.max(0.0))
}

/// Removes the component of `g` along the unit vector `u`.
pub(crate) fn project_tangent(g: &mut [f64], u: &[f64]) {
    let along = dot(g, u);
    for (gi, ui) in g.iter_mut().zip(u) {
        *gi -= along * ui;
    }
}

/// `out += scale * v`
pub(crate) fn axpy(out: &mut [f64], scale: f64, v: &[f64]) {
    for (o, x) in out.iter_mut().zip(v) {
        *o += scale * x;
    }
}
