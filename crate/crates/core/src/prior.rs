//! Class prior of the auxiliary OOD set (estimated by counting the pretrained
//! model's predictions), its gamma-generalized form, and the per-sample
//! majority statistic `Z_gamma`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, softmax_into, Posterior};
use crate::model::Mlp;
use crate::numfmt;

/// Number of auxiliary samples the model assigns to each class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(pub Vec<u64>);

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn merge(&mut self, other: &ClassCounts) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }
}

/// Tallies `argmax f(x)` over the stream (ties to the lowest class).
pub fn count_predictions<I, X>(model: &Mlp, samples: I) -> Result<ClassCounts>
where
    I: IntoIterator<Item = X>,
    X: AsRef<[f64]>,
{
    let mut counts = vec![0u64; model.num_classes()];
    let mut seen = 0usize;
    for x in samples {
        let logits = model.forward(x.as_ref())?;
        counts[logits.argmax()] += 1;
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::empty("no auxiliary samples to count"));
    }
    Ok(ClassCounts(counts))
}

/// Same tally with the stream split into `chunk` sized pieces counted on the
/// rayon pool; per-chunk counts are summed in chunk order.
pub fn count_predictions_parallel<X>(model: &Mlp, samples: &[X], chunk: usize) -> Result<ClassCounts>
where
    X: AsRef<[f64]> + Sync,
{
    use rayon::prelude::*;
    if samples.is_empty() {
        return Err(Error::empty("no auxiliary samples to count"));
    }
    let parts: Vec<ClassCounts> = samples
        .par_chunks(chunk.max(1))
        .map(|c| count_predictions(model, c.iter().map(AsRef::as_ref)))
        .collect::<Result<_>>()?;
    let mut total = ClassCounts(vec![0; model.num_classes()]);
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// `P(y = i | o) = N_i / sum_j N_j`.
pub fn estimate_prior(c: &ClassCounts) -> Result<Vec<f64>> {
    let total = c.total();
    if total == 0 {
        return Err(Error::empty("all class counts are zero"));
    }
    Ok(c.0.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Estimated prior together with its gamma-sharpened (or flattened, or
/// inverted for gamma < 0) renormalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodPrior {
    #[serde(rename = "K")]
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<u64>>,
    pub p: Vec<f64>,
    pub gamma: f64,
    pub epsilon: f64,
    pub p_gamma: Vec<f64>,
}

impl OodPrior {
    pub fn to_json(&self) -> Result<String> {
        numfmt::to_json(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let prior: OodPrior = serde_json::from_str(s)?;
        prior.validate()?;
        Ok(prior)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 || self.p.len() != k || self.p_gamma.len() != k {
            return Err(Error::invalid(format!("prior vectors must all have K = {k} >= 2 entries")));
        }
        if self.counts.as_ref().is_some_and(|c| c.len() != k) {
            return Err(Error::invalid("prior counts length differs from K"));
        }
        check_distribution(&self.p, "p")?;
        check_distribution(&self.p_gamma, "p_gamma")
    }
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::invalid(format!("{name} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `P_gamma(i) = (p_i + eps)^gamma / sum_j (p_j + eps)^gamma`, evaluated in log
/// space. A zero entry with gamma < 0 is a singularity unless `epsilon > 0`.
pub fn generalize_prior(p: &[f64], gamma: f64, epsilon: f64) -> Result<OodPrior> {
    if p.len() < 2 {
        return Err(Error::invalid("prior needs K >= 2 entries"));
    }
    check_distribution(p, "prior")?;
    if !gamma.is_finite() {
        return Err(Error::invalid("gamma must be finite"));
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let k = p.len();
    let p_gamma = if gamma == 0.0 {
        vec![1.0 / k as f64; k]
    } else {
        let mut logs = Vec::with_capacity(k);
        for (i, &pi) in p.iter().enumerate() {
            let base = pi + epsilon;
            if base == 0.0 {
                if gamma < 0.0 {
                    return Err(Error::Singularity(format!(
                        "class {i} has zero prior mass and gamma = {gamma} < 0; pass epsilon > 0"
                    )));
                }
                logs.push(f64::NEG_INFINITY);
            } else {
                logs.push(gamma * base.ln());
            }
        }
        let mut out = vec![0.0; k];
        softmax_into(&logs, 1.0, &mut out);
        out
    };
    Ok(OodPrior { num_classes: k, counts: None, p: p.to_vec(), gamma, epsilon, p_gamma })
}

/// `Z_gamma = sum_j posterior_j * P_gamma(j)`; exactly `1/K` when gamma is 0.
pub fn z_gamma(post: &Posterior, prior: &OodPrior) -> Result<f64> {
    if post.num_classes() != prior.num_classes {
        return Err(Error::invalid(format!(
            "posterior has K = {} but prior has K = {}",
            post.num_classes(),
            prior.num_classes
        )));
    }
    Ok(z_from_probs(post.probs(), prior))
}

pub(crate) fn z_from_probs(probs: &[f64], prior: &OodPrior) -> f64 {
    if prior.gamma == 0.0 {
        return 1.0 / prior.num_classes as f64;
    }
    probs.iter().zip(&prior.p_gamma).map(|(a, b)| a * b).sum()
}

/// Index of the estimated majority OOD class.
pub fn majority_class(p: &[f64]) -> usize {
    argmax(p)
}
