//! Numerically stable primitives: log-sum-exp, softmax, energy, MSP and
//! cross-entropy. All exp-sums are max-shifted.

use crate::error::{Error, Result};

/// Raw class scores `f(x)` for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!("logits need K >= 2 entries, got {}", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("logit {i} is not finite ({})", values[i])));
        }
        Ok(Logits(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Softmax probabilities over K classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior(Vec<f64>);

impl Posterior {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Builds a posterior from an explicit probability vector (used by tests and
    /// callers that already hold normalized probabilities).
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid("posterior needs K >= 2"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("posterior entries must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("posterior sums to {total}, not 1")));
        }
        Ok(Posterior(probs))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `T * log(sum_j exp(v_j / T))`.
pub fn log_sum_exp(v: &[f64], temperature: f64) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::invalid("log_sum_exp of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("log_sum_exp input contains a non-finite entry"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    Ok(lse_unchecked(v, temperature))
}

pub(crate) fn lse_unchecked(v: &[f64], t: f64) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|&x| ((x - max) / t).exp()).sum();
    max + t * s.ln()
}

/// Softmax of `v / t` written into `out`.
pub(crate) fn softmax_into(v: &[f64], t: f64, out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = ((x - max) / t).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Free energy `E(x; f) = -T log sum_j exp(f_j / T)`; low for confident ID inputs.
pub fn energy_score(l: &Logits, temperature: f64) -> Result<f64> {
    Ok(-log_sum_exp(&l.0, temperature)?)
}

pub fn softmax(l: &Logits) -> Posterior {
    let mut out = vec![0.0; l.0.len()];
    softmax_into(&l.0, 1.0, &mut out);
    Posterior(out)
}

/// Maximum softmax probability.
pub fn msp_score(l: &Logits) -> f64 {
    softmax(l).0.into_iter().fold(0.0, f64::max)
}

/// `-log softmax(l)_y`, evaluated as `lse(l) - l_y`.
pub fn cross_entropy(l: &Logits, y: usize) -> Result<f64> {
    if y >= l.0.len() {
        return Err(Error::invalid(format!("label {y} out of range for K = {}", l.0.len())));
    }
    Ok((lse_unchecked(&l.0, 1.0) - l.0[y]).max(0.0))
}
