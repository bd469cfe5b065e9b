//! Regularized training objectives as functions of logits, each returning its
//! value together with the exact gradient with respect to every logit.
//!
//! All expectations are estimated by plain mini-batch means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{lse_unchecked, softmax_into, Logits};
use crate::prior::{z_from_probs, OodPrior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Outlier exposure: cross-entropy to the uniform label on outliers.
    Oe,
    /// Squared hinges on ID and OOD energies with fixed margins.
    EnergyOe,
    /// Squared hinges with the OOD term margin-shifted and weighted by `Z_gamma`.
    BalancedEnergy,
}

/// Which posterior feeds `Z_gamma` during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZSource {
    /// The model being trained.
    #[default]
    Live,
    /// The frozen pretrained model, evaluated once per auxiliary sample.
    Pretrained,
}

/// Which side of `m_out` the OOD hinge penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodHinge {
    /// `max(0, E - m_out - alpha Z)`: penalizes outlier energies above the margin.
    PenalizeAbove,
    /// `max(0, m_out + alpha Z - E)`: penalizes outlier energies below the margin.
    #[default]
    PenalizeBelow,
}

impl OodHinge {
    fn sign(self) -> f64 {
        match self {
            OodHinge::PenalizeAbove => 1.0,
            OodHinge::PenalizeBelow => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: Variant,
    pub temperature: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub m_in: f64,
    pub m_out: f64,
    pub detach_z: bool,
    pub margin_on: bool,
    pub weight_on: bool,
    pub z_source: ZSource,
    #[serde(default)]
    pub ood_hinge: OodHinge,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: Variant::BalancedEnergy,
            temperature: 1.0,
            lambda: 0.1,
            alpha: 0.0,
            gamma: 0.0,
            m_in: -23.0,
            m_out: -5.0,
            detach_z: true,
            margin_on: true,
            weight_on: true,
            z_source: ZSource::Live,
            ood_hinge: OodHinge::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if ![self.gamma, self.m_in, self.m_out].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("gamma and margins must be finite"));
        }
        Ok(())
    }

    /// Non-fatal configuration smells worth a log line.
    pub fn lint(&self) -> Option<String> {
        (self.variant != Variant::Oe && self.m_in >= self.m_out).then(|| {
            format!(
                "m_in = {} is not below m_out = {}; the ID and OOD hinges target overlapping energies",
                self.m_in, self.m_out
            )
        })
    }
}

/// `beta * K * (m_out - m_in)`: the margin scale whose uniform-prior shift
/// `alpha / K` is a fraction `beta` of the margin gap.
pub fn alpha_from_beta(beta: f64, num_classes: usize, m_in: f64, m_out: f64) -> f64 {
    beta * num_classes as f64 * (m_out - m_in)
}

/// A differentiable batch scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrad {
    pub value: f64,
    /// d value / d logits, one row per sample.
    pub grad: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub l_in_hinge: f64,
    pub l_out: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub grad_logits_in: Vec<Vec<f64>>,
    pub grad_logits_out: Vec<Vec<f64>>,
    pub terms: LossTerms,
}

fn batch_k(batch: &[Logits], what: &str) -> Result<usize> {
    let first = batch.first().ok_or_else(|| Error::empty(format!("{what} batch is empty")))?;
    let k = first.num_classes();
    if batch.iter().any(|l| l.num_classes() != k) {
        return Err(Error::invalid(format!("{what} batch mixes different K")));
    }
    Ok(k)
}

/// Mean over the batch of `H(u, softmax(l)) = lse(l) - mean(l)`.
pub fn oe_regularizer(logits_out: &[Logits]) -> Result<ScalarGrad> {
    let k = batch_k(logits_out, "OOD")?;
    let n = logits_out.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits_out.len());
    for l in logits_out {
        let v = l.values();
        value += lse_unchecked(v, 1.0) - v.iter().sum::<f64>() / k as f64;
        let mut g = vec![0.0; k];
        softmax_into(v, 1.0, &mut g);
        g.iter_mut().for_each(|x| *x = (*x - 1.0 / k as f64) / n);
        grad.push(g);
    }
    Ok(ScalarGrad { value: value / n, grad })
}

/// Energy and its logit gradient `-softmax(l / T)`.
fn energy_with_grad(l: &[f64], t: f64, grad: &mut [f64]) -> f64 {
    softmax_into(l, t, grad);
    grad.iter_mut().for_each(|g| *g = -*g);
    -lse_unchecked(l, t)
}

/// Mean of `max(0, side * (E(x) - margin))^2`.
fn hinge_sq(batch: &[Logits], t: f64, margin: f64, side: f64, what: &str) -> Result<ScalarGrad> {
    let k = batch_k(batch, what)?;
    if !(t > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {t}")));
    }
    let n = batch.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(batch.len());
    for l in batch {
        let mut g = vec![0.0; k];
        let e = energy_with_grad(l.values(), t, &mut g);
        let h = (side * (e - margin)).max(0.0);
        value += h * h;
        let scale = 2.0 * h * side / n;
        g.iter_mut().for_each(|x| *x *= scale);
        grad.push(g);
    }
    Ok(ScalarGrad { value: value / n, grad })
}

/// Mean of `max(0, E(x) - m_in)^2` over the ID batch.
pub fn hinge_sq_in(logits_in: &[Logits], temperature: f64, m_in: f64) -> Result<ScalarGrad> {
    hinge_sq(logits_in, temperature, m_in, 1.0, "ID")
}

/// Squared hinge on OOD energies: `max(0, E(x) - m_out)^2` for
/// [`OodHinge::PenalizeAbove`], `max(0, m_out - E(x))^2` for
/// [`OodHinge::PenalizeBelow`], averaged over the batch.
pub fn hinge_sq_out(logits_out: &[Logits], temperature: f64, m_out: f64, side: OodHinge) -> Result<ScalarGrad> {
    hinge_sq(logits_out, temperature, m_out, side.sign(), "OOD")
}

/// Mean of `max(0, side * (E(x) - m_out - alpha Z))^2 * Z` with `Z = Z_gamma(x)`
/// from the softmax of the same logits; `side` is +1 for
/// [`OodHinge::PenalizeAbove`] and -1 for [`OodHinge::PenalizeBelow`]. Either
/// adaptive component can be switched off (`margin_on`, `weight_on`) for
/// ablations.
pub fn balanced_out_loss(logits_out: &[Logits], prior: &OodPrior, cfg: &LossConfig) -> Result<ScalarGrad> {
    balanced_out_loss_with_z(logits_out, prior, cfg, None)
}

/// As [`balanced_out_loss`], but with `Z` supplied per sample (treated as a
/// constant) when `fixed_z` is given.
pub fn balanced_out_loss_with_z(
    logits_out: &[Logits],
    prior: &OodPrior,
    cfg: &LossConfig,
    fixed_z: Option<&[f64]>,
) -> Result<ScalarGrad> {
    if cfg.variant != Variant::BalancedEnergy {
        return Err(Error::invalid(format!("balanced loss called with variant {:?}", cfg.variant)));
    }
    if prior.gamma != cfg.gamma {
        return Err(Error::invalid(format!(
            "prior was generalized with gamma = {} but the loss config has gamma = {}",
            prior.gamma, cfg.gamma
        )));
    }
    let k = batch_k(logits_out, "OOD")?;
    if k != prior.num_classes {
        return Err(Error::invalid(format!("logits have K = {k} but the prior has K = {}", prior.num_classes)));
    }
    if let Some(z) = fixed_z {
        if z.len() != logits_out.len() {
            return Err(Error::invalid("fixed Z length differs from the OOD batch"));
        }
    }
    let t = cfg.temperature;
    let n = logits_out.len() as f64;
    let through_z = fixed_z.is_none() && !cfg.detach_z && prior.gamma != 0.0;
    let side = cfg.ood_hinge.sign();
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits_out.len());
    let mut post = vec![0.0; k];
    for (idx, l) in logits_out.iter().enumerate() {
        let v = l.values();
        let mut g = vec![0.0; k];
        let e = energy_with_grad(v, t, &mut g);
        softmax_into(v, 1.0, &mut post);
        let z = match fixed_z {
            Some(z) => z[idx],
            None => z_from_probs(&post, prior),
        };
        let margin = if cfg.margin_on { cfg.alpha * z } else { 0.0 };
        let weight = if cfg.weight_on { z } else { 1.0 };
        let h = (side * (e - cfg.m_out - margin)).max(0.0);
        value += h * h * weight;
        // dL/dl = 2 h w s (dE - alpha dZ) + h^2 dZ, dZ_k = post_k (P_gamma_k - Z)
        let dmargin = if cfg.margin_on { cfg.alpha } else { 0.0 };
        let dweight = if cfg.weight_on { 1.0 } else { 0.0 };
        for (j, gj) in g.iter_mut().enumerate() {
            let mut d = 2.0 * h * weight * side * *gj;
            if through_z && h > 0.0 {
                let dz = post[j] * (prior.p_gamma[j] - z);
                d += (h * h * dweight - 2.0 * h * weight * side * dmargin) * dz;
            }
            *gj = d / n;
        }
        grad.push(g);
    }
    Ok(ScalarGrad { value: value / n, grad })
}

/// Mean cross-entropy `lse(l) - l_y` over a labeled batch.
pub fn cross_entropy_batch(logits: &[Logits], labels: &[usize]) -> Result<ScalarGrad> {
    let k = batch_k(logits, "ID")?;
    if labels.len() != logits.len() {
        return Err(Error::invalid(format!("{} labels for {} ID samples", labels.len(), logits.len())));
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (l, &y) in logits.iter().zip(labels) {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for K = {k}")));
        }
        let v = l.values();
        value += lse_unchecked(v, 1.0) - v[y];
        let mut g = vec![0.0; k];
        softmax_into(v, 1.0, &mut g);
        g[y] -= 1.0;
        g.iter_mut().for_each(|x| *x /= n);
        grad.push(g);
    }
    Ok(ScalarGrad { value: value / n, grad })
}

/// Mean ID cross-entropy plus `lambda` times the variant's regularizer.
pub fn total_objective(
    logits_in: &[Logits],
    labels: &[usize],
    logits_out: &[Logits],
    prior: Option<&OodPrior>,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    total_objective_with_z(logits_in, labels, logits_out, prior, cfg, None)
}

pub fn total_objective_with_z(
    logits_in: &[Logits],
    labels: &[usize],
    logits_out: &[Logits],
    prior: Option<&OodPrior>,
    cfg: &LossConfig,
    fixed_z: Option<&[f64]>,
) -> Result<BatchLoss> {
    cfg.validate()?;
    let k = batch_k(logits_in, "ID")?;
    if batch_k(logits_out, "OOD")? != k {
        return Err(Error::invalid("ID and OOD logits disagree on K"));
    }
    let ScalarGrad { value: ce, grad: mut grad_in } = cross_entropy_batch(logits_in, labels)?;

    let (reg_in, reg_out) = match cfg.variant {
        Variant::Oe => (None, oe_regularizer(logits_out)?),
        Variant::EnergyOe => (
            Some(hinge_sq_in(logits_in, cfg.temperature, cfg.m_in)?),
            hinge_sq_out(logits_out, cfg.temperature, cfg.m_out, cfg.ood_hinge)?,
        ),
        Variant::BalancedEnergy => {
            let prior = prior.ok_or_else(|| Error::invalid("balanced energy loss needs an OOD prior"))?;
            (
                Some(hinge_sq_in(logits_in, cfg.temperature, cfg.m_in)?),
                balanced_out_loss_with_z(logits_out, prior, cfg, fixed_z)?,
            )
        }
    };

    let lambda = cfg.lambda;
    let l_in_hinge = reg_in.as_ref().map_or(0.0, |r| r.value);
    if let Some(r) = &reg_in {
        for (g, rg) in grad_in.iter_mut().zip(&r.grad) {
            for (a, b) in g.iter_mut().zip(rg) {
                *a += lambda * b;
            }
        }
    }
    let grad_out = reg_out.grad.iter().map(|g| g.iter().map(|x| lambda * x).collect()).collect();
    let terms = LossTerms { ce, l_in_hinge, l_out: reg_out.value };
    Ok(BatchLoss {
        value: ce + lambda * (l_in_hinge + reg_out.value),
        grad_logits_in: grad_in,
        grad_logits_out: grad_out,
        terms,
    })
}
