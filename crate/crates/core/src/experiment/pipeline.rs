//! In-memory pipeline: data generation, pretraining, prior estimation,
//! loss resolution, fine-tuning and evaluation for one seed.

use serde::{Deserialize, Serialize};

use super::config::{AlphaRule, ExperimentConfig, MarginRule, ValidationOod};
use crate::data::{
    gen_auxiliary_ood, gen_auxiliary_ood_stream, gen_longtail_id, gen_test_ood, gen_test_ood_stream, Dataset,
    DatasetSpec, Role,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, ScoreKind};
use crate::losses::{alpha_from_beta, LossConfig, Variant};
use crate::math::energy_score;
use crate::model::{finetune_balanced, pretrain_standard, AdamParams, FinetuneConfig, Mlp, PretrainConfig, TrainTrace};
use crate::prior::{count_predictions, estimate_prior, generalize_prior, ClassCounts, OodPrior};
use crate::rng::tags;

/// Every split of one seeded benchmark instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBundle {
    pub spec: DatasetSpec,
    pub affinity: Vec<f64>,
    pub id_train: Dataset,
    pub id_test: Dataset,
    pub id_val: Dataset,
    pub ood_aux: Dataset,
    pub ood_val: Dataset,
    pub ood_test: Dataset,
}

impl DataBundle {
    pub const SPLITS: [&'static str; 6] = ["id_train", "id_test", "id_val", "ood_aux", "ood_val", "ood_test"];

    pub fn split(&self, name: &str) -> Option<&Dataset> {
        Some(match name {
            "id_train" => &self.id_train,
            "id_test" => &self.id_test,
            "id_val" => &self.id_val,
            "ood_aux" => &self.ood_aux,
            "ood_val" => &self.ood_val,
            "ood_test" => &self.ood_test,
            _ => return None,
        })
    }

    pub fn role_of(name: &str) -> Role {
        match name {
            "id_train" => Role::IdTrain,
            "id_test" | "id_val" => Role::IdTest,
            "ood_aux" => Role::OodAux,
            _ => Role::OodTest,
        }
    }
}

pub fn generate_data(cfg: &ExperimentConfig, seed: u64) -> Result<DataBundle> {
    let d = &cfg.data;
    let spec = d.spec(seed);
    let (id_train, id_test) = gen_longtail_id(&spec)?;
    let id_val = spec.balanced_split(d.n_val_per_class, tags::ID_VAL)?;
    let affinity = d.affinity(&spec);
    let ood_aux = gen_auxiliary_ood(&spec, &affinity, d.aux.n, d.aux.offset_scale, seed)?;
    let regime = d.test_regime(&spec);
    let ood_test = gen_test_ood(d.dim, d.n_test_ood, &regime, seed)?;
    let ood_val = match d.validation_ood {
        ValidationOod::TestRegime => gen_test_ood_stream(d.dim, d.n_val_ood, &regime, seed, tags::OOD_VAL)?,
        ValidationOod::AuxHoldout => {
            let aux = gen_auxiliary_ood_stream(&spec, &affinity, d.n_val_ood, d.aux.offset_scale, seed, tags::OOD_VAL)?;
            Dataset { role: Role::OodTest, ..aux }
        }
    };
    Ok(DataBundle { spec, affinity, id_train, id_test, id_val, ood_aux, ood_val, ood_test })
}

pub fn pretrain_config(cfg: &ExperimentConfig, seed: u64) -> PretrainConfig {
    PretrainConfig {
        hidden: cfg.model.hidden.clone(),
        activation: cfg.model.activation,
        epochs: cfg.pretrain.epochs,
        lr0: cfg.pretrain.lr0,
        batch_size: cfg.pretrain.batch_size,
        seed,
        adam: AdamParams::default(),
    }
}

pub fn finetune_config(cfg: &ExperimentConfig, seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        epochs: cfg.finetune.epochs,
        batch_in: cfg.finetune.batch_in,
        batch_out: cfg.finetune.batch_out,
        lr0: cfg.finetune.lr0,
        freeze: cfg.finetune.freeze.clone(),
        seed,
        adam: AdamParams::default(),
    }
}

/// Linear-interpolation percentile (`q` in 0..=100).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::empty("percentile of no values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn energies(model: &Mlp, d: &Dataset, temperature: f64) -> Result<Vec<f64>> {
    d.features.iter().map(|x| energy_score(&model.forward(x)?, temperature)).collect()
}

/// `(m_in, m_out)` from the margin rule, using the pretrained model.
pub fn resolve_margins(
    cfg: &ExperimentConfig,
    pretrained: &Mlp,
    id_train: &Dataset,
    ood_aux: &Dataset,
) -> Result<(f64, f64)> {
    match cfg.loss.margins {
        MarginRule::Explicit { m_in, m_out } => Ok((m_in, m_out)),
        MarginRule::Percentile { id, ood } => {
            let t = cfg.loss.temperature;
            Ok((
                percentile(&energies(pretrained, id_train, t)?, id)?,
                percentile(&energies(pretrained, ood_aux, t)?, ood)?,
            ))
        }
    }
}

/// Prior-count-dependent smoothing: explicit, or `1 / (2 * total)` when gamma < 0.
pub fn resolve_epsilon(cfg: &ExperimentConfig, gamma: f64, total: u64) -> f64 {
    match cfg.prior.epsilon {
        Some(e) => e,
        None if gamma < 0.0 => 1.0 / (2.0 * total as f64),
        None => 0.0,
    }
}

/// Concrete loss configuration for a run given its margins.
pub fn resolve_loss(cfg: &ExperimentConfig, m_in: f64, m_out: f64) -> Result<LossConfig> {
    let l = &cfg.loss;
    let alpha = match l.alpha {
        AlphaRule::Value(a) => a,
        AlphaRule::Beta(beta) => {
            let a = alpha_from_beta(beta, cfg.data.num_classes, m_in, m_out);
            if a < 0.0 {
                log::warn!("derived alpha {a} is negative (m_out {m_out} < m_in {m_in}); using 0");
            }
            a.max(0.0)
        }
    };
    let loss = LossConfig {
        variant: l.variant,
        temperature: l.temperature,
        lambda: l.lambda,
        alpha,
        gamma: l.gamma,
        m_in,
        m_out,
        detach_z: l.detach_z,
        margin_on: l.margin_on,
        weight_on: l.weight_on,
        z_source: l.z_source,
        ood_hinge: l.ood_hinge,
    };
    loss.validate()?;
    Ok(loss)
}

/// Everything shared by the fine-tuning runs of one seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub data: DataBundle,
    pub pretrained: Mlp,
    pub pretrain_trace: TrainTrace,
    pub counts: ClassCounts,
    pub prior_p: Vec<f64>,
    pub m_in: f64,
    pub m_out: f64,
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let data = generate_data(cfg, seed)?;
    let (pretrained, pretrain_trace) =
        pretrain_standard(&data.id_train, cfg.data.num_classes, &pretrain_config(cfg, seed))?;
    let counts = count_predictions(&pretrained, &data.ood_aux.features)?;
    let prior_p = estimate_prior(&counts)?;
    let (m_in, m_out) = resolve_margins(cfg, &pretrained, &data.id_train, &data.ood_aux)?;
    Ok(SeedContext { seed, data, pretrained, pretrain_trace, counts, prior_p, m_in, m_out })
}

impl SeedContext {
    pub fn prior(&self, cfg: &ExperimentConfig, gamma: f64) -> Result<OodPrior> {
        let eps = resolve_epsilon(cfg, gamma, self.counts.total());
        let mut prior = generalize_prior(&self.prior_p, gamma, eps)?;
        prior.counts = Some(self.counts.0.clone());
        Ok(prior)
    }

    pub fn evaluate(&self, model: &Mlp, cfg: &ExperimentConfig, score: ScoreKind) -> Result<(EvalReport, EvalReport)> {
        let t = cfg.loss.temperature;
        let val = evaluate(model, &self.data.id_val, &self.data.ood_val, score, t)?;
        let test = evaluate(model, &self.data.id_test, &self.data.ood_test, score, t)?;
        Ok((val, test))
    }
}

/// One fine-tuning run and its validation/test metrics.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub loss: LossConfig,
    pub prior: Option<OodPrior>,
    pub model: Mlp,
    pub trace: TrainTrace,
    pub val: EvalReport,
    pub test: EvalReport,
}

pub fn run_finetune(cfg: &ExperimentConfig, ctx: &SeedContext) -> Result<RunOutput> {
    let loss = resolve_loss(cfg, ctx.m_in, ctx.m_out)?;
    let prior = match loss.variant {
        Variant::BalancedEnergy => Some(ctx.prior(cfg, loss.gamma)?),
        _ => None,
    };
    let (model, trace) = finetune_balanced(
        &ctx.pretrained,
        &ctx.data.id_train,
        &ctx.data.ood_aux,
        prior.as_ref(),
        &loss,
        &finetune_config(cfg, ctx.seed),
    )?;
    let (val, test) = ctx.evaluate(&model, cfg, cfg.eval.score)?;
    Ok(RunOutput { loss, prior, model, trace, val, test })
}

/// Loss-side knobs that distinguish the cells of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub variant: Variant,
    pub gamma: f64,
    pub margin_on: bool,
    pub weight_on: bool,
}

impl CellSpec {
    pub fn balanced(gamma: f64) -> Self {
        CellSpec { variant: Variant::BalancedEnergy, gamma, margin_on: true, weight_on: true }
    }

    pub fn energy_oe() -> Self {
        CellSpec { variant: Variant::EnergyOe, gamma: 0.0, margin_on: false, weight_on: false }
    }

    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.loss.variant = self.variant;
        c.loss.gamma = self.gamma;
        c.loss.margin_on = self.margin_on;
        c.loss.weight_on = self.weight_on;
        c
    }

    pub fn label(&self) -> String {
        match self.variant {
            Variant::EnergyOe => "energy_oe".into(),
            Variant::Oe => "oe".into(),
            Variant::BalancedEnergy => format!(
                "balanced_g{}_m{}_w{}",
                crate::numfmt::g17(self.gamma),
                u8::from(self.margin_on),
                u8::from(self.weight_on)
            ),
        }
    }
}
