//! Independent oracles shared by the integration tests and the acceptance gate.
#![allow(dead_code)]

use balanced_energy::losses::{total_objective, total_objective_with_z, LossConfig, OodHinge, Variant};
use balanced_energy::math::{energy_score, softmax, Logits};
use balanced_energy::prior::{generalize_prior, z_gamma, OodPrior};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn logits(v: &[f64]) -> Logits {
    Logits::new(v.to_vec()).unwrap()
}

/// One random evaluation point of the total objective.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub logits_in: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub logits_out: Vec<Vec<f64>>,
    pub prior: Option<OodPrior>,
    pub cfg: LossConfig,
}

fn wrap(v: &[Vec<f64>]) -> Vec<Logits> {
    v.iter().map(|x| logits(x)).collect()
}

/// Distance of every hinge argument from its kink, so cases sitting on a
/// kink (where the derivative jumps) can be redrawn.
fn kink_distance(c: &GradCase) -> f64 {
    let t = c.cfg.temperature;
    let mut d = f64::INFINITY;
    if c.cfg.variant == Variant::Oe {
        return d;
    }
    for l in wrap(&c.logits_in) {
        d = d.min((energy_score(&l, t).unwrap() - c.cfg.m_in).abs());
    }
    for l in wrap(&c.logits_out) {
        let e = energy_score(&l, t).unwrap();
        let shift = match (&c.prior, c.cfg.variant) {
            (Some(p), Variant::BalancedEnergy) if c.cfg.margin_on => c.cfg.alpha * z_gamma(&softmax(&l), p).unwrap(),
            _ => 0.0,
        };
        d = d.min((e - c.cfg.m_out - shift).abs());
    }
    d
}

pub fn random_case(r: &mut ChaCha8Rng, variant: Variant, detach_z: bool) -> GradCase {
    loop {
        let k = r.random_range(2..=6);
        let n_in = r.random_range(1..=8);
        let n_out = r.random_range(1..=8);
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..k).map(|_| r.random_range(-4.0..4.0)).collect()).collect()
        };
        let logits_in = draw(n_in);
        let logits_out = draw(n_out);
        let labels = (0..n_in).map(|_| r.random_range(0..k)).collect();
        let t = [1.0, 0.5, 2.0][r.random_range(0..3)];
        let gamma = [0.0, 0.5, 1.0, 2.0, -0.75][r.random_range(0..5)];
        let mut p: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        let cfg = LossConfig {
            variant,
            temperature: t,
            lambda: r.random_range(0.05..1.0),
            alpha: r.random_range(0.0..3.0),
            gamma,
            m_in: r.random_range(-6.0..-1.0),
            m_out: r.random_range(-6.0..-1.0),
            detach_z,
            margin_on: r.random_bool(0.8),
            weight_on: r.random_bool(0.8),
            ood_hinge: if r.random_bool(0.5) { OodHinge::PenalizeBelow } else { OodHinge::PenalizeAbove },
            ..LossConfig::default()
        };
        let prior = (variant == Variant::BalancedEnergy).then(|| generalize_prior(&p, gamma, 0.0).unwrap());
        let c = GradCase { logits_in, labels, logits_out, prior, cfg };
        if kink_distance(&c) > 1e-3 {
            return c;
        }
    }
}

fn objective(c: &GradCase, li: &[Vec<f64>], lo: &[Vec<f64>], z: Option<&[f64]>) -> f64 {
    total_objective_with_z(&wrap(li), &c.labels, &wrap(lo), c.prior.as_ref(), &c.cfg, z).unwrap().value
}

/// Largest per-coordinate relative error between the analytic logit
/// gradients and central differences. With `detach_z`, Z is frozen at the
/// base point, which is the function the detached gradient differentiates.
pub fn fd_max_rel_err(c: &GradCase) -> f64 {
    let analytic =
        total_objective(&wrap(&c.logits_in), &c.labels, &wrap(&c.logits_out), c.prior.as_ref(), &c.cfg).unwrap();
    let z0: Option<Vec<f64>> = match (&c.prior, c.cfg.detach_z) {
        (Some(p), true) => Some(wrap(&c.logits_out).iter().map(|l| z_gamma(&softmax(l), p).unwrap()).collect()),
        _ => None,
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut check = |a: f64, num: f64| {
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
        worst = worst.max(rel);
    };
    for side in 0..2 {
        let base = if side == 0 { &c.logits_in } else { &c.logits_out };
        let grads = if side == 0 { &analytic.grad_logits_in } else { &analytic.grad_logits_out };
        for i in 0..base.len() {
            for j in 0..base[i].len() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[i][j] += h;
                minus[i][j] -= h;
                let (fp, fm) = if side == 0 {
                    (
                        objective(c, &plus, &c.logits_out, z0.as_deref()),
                        objective(c, &minus, &c.logits_out, z0.as_deref()),
                    )
                } else {
                    (
                        objective(c, &c.logits_in, &plus, z0.as_deref()),
                        objective(c, &c.logits_in, &minus, z0.as_deref()),
                    )
                };
                check(grads[i][j], (fp - fm) / (2.0 * h));
            }
        }
    }
    worst
}

/// Scores with many ties: small integers, optionally all from one pool.
pub fn tied_scores(r: &mut ChaCha8Rng, n: usize, range: i32) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-range..=range) as f64 * 0.5).collect()
}

/// Pairwise Mann-Whitney statistic, ties counted 1/2.
pub fn auroc_pairs(id: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for &o in ood {
        for &i in id {
            s += if o > i {
                1.0
            } else if o == i {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (id.len() * ood.len()) as f64
}

/// PR walk with OOD positives, descending score, ID before OOD inside a tie.
pub fn ap_walk(id: &[f64], ood: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = id.iter().map(|&s| (s, false)).chain(ood.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut tp = 0.0;
    let mut ap = 0.0;
    for (rank, &(_, pos)) in all.iter().enumerate() {
        if pos {
            tp += 1.0;
            ap += tp / (rank + 1) as f64;
        }
    }
    ap / ood.len() as f64
}

/// Scan every observed score as a threshold; keep the largest one whose
/// TPR reaches `level` and report its FPR.
pub fn fpr_scan(id: &[f64], ood: &[f64], level: f64) -> f64 {
    let mut best: Option<f64> = None;
    for &t in id.iter().chain(ood) {
        let tpr = ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64;
        if tpr >= level && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("the smallest OOD score always reaches full TPR");
    id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64
}
