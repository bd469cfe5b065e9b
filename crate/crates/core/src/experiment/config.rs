use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{circle_means, DatasetSpec, TestOodRegime};
use crate::error::{Error, Result};
use crate::eval::ScoreKind;
use crate::losses::{OodHinge, Variant, ZSource};
use crate::model::{Activation, FreezeSpec};

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

/// Class mix of the auxiliary outliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinityRule {
    /// Proportional to the long-tailed ID class sizes.
    IdSizes,
    Uniform,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxConfig {
    pub n: usize,
    pub offset_scale: f64,
    pub affinity: AffinityRule,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig { n: 2000, offset_scale: 1.5, affinity: AffinityRule::IdSizes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestOodConfig {
    /// Sphere of `radius` around the centroid of the class means.
    Ring {
        radius: f64,
    },
    FarUniform {
        low: f64,
        high: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationOod {
    /// Held-out draw from the auxiliary outlier generator.
    AuxHoldout,
    /// Independent draw from the test outlier regime.
    TestRegime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dim: usize,
    pub num_classes: usize,
    pub n_head: usize,
    pub rho: f64,
    pub mean_radius: f64,
    pub class_scale: f64,
    pub n_test_per_class: usize,
    pub n_val_per_class: usize,
    pub aux: AuxConfig,
    pub test_ood: TestOodConfig,
    pub n_test_ood: usize,
    pub validation_ood: ValidationOod,
    pub n_val_ood: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dim: 2,
            num_classes: 5,
            n_head: 1000,
            rho: 100.0,
            mean_radius: 4.0,
            class_scale: 0.6,
            n_test_per_class: 200,
            n_val_per_class: 100,
            aux: AuxConfig::default(),
            test_ood: TestOodConfig::Ring { radius: 9.0 },
            n_test_ood: 1000,
            validation_ood: ValidationOod::TestRegime,
            n_val_ood: 500,
        }
    }
}

impl DataConfig {
    pub fn spec(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            dim: self.dim,
            num_classes: self.num_classes,
            n_head: self.n_head,
            rho: self.rho,
            class_means: circle_means(self.num_classes, self.dim, self.mean_radius),
            class_scale: self.class_scale,
            n_test_per_class: self.n_test_per_class,
            seed,
        }
    }

    pub fn affinity(&self, spec: &DatasetSpec) -> Vec<f64> {
        match &self.aux.affinity {
            AffinityRule::IdSizes => spec.size_affinity(),
            AffinityRule::Uniform => vec![1.0 / self.num_classes as f64; self.num_classes],
            AffinityRule::Explicit(v) => v.clone(),
        }
    }

    pub fn test_regime(&self, spec: &DatasetSpec) -> TestOodRegime {
        match &self.test_ood {
            TestOodConfig::Ring { radius } => {
                let k = spec.class_means.len() as f64;
                let center = (0..spec.dim).map(|j| spec.class_means.iter().map(|m| m[j]).sum::<f64>() / k).collect();
                TestOodRegime::Ring { center, radius: *radius }
            }
            TestOodConfig::FarUniform { low, high } => TestOodRegime::FarUniform { low: *low, high: *high },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![64, 64], activation: Activation::Tanh }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainHyper {
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper { epochs: 60, lr0: 0.01, batch_size: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorOptions {
    /// Smoothing added to every prior entry before the gamma power; `None`
    /// resolves to `1 / (2 * total count)` for negative gamma and 0 otherwise.
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    Value(f64),
    /// `alpha = beta * K * (m_out - m_in)`.
    Beta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginRule {
    Explicit {
        m_in: f64,
        m_out: f64,
    },
    /// Percentiles (0-100) of pretrained energies: ID train for `m_in`, auxiliary OOD for `m_out`.
    Percentile {
        id: f64,
        ood: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossOptions {
    pub variant: Variant,
    pub temperature: f64,
    pub lambda: f64,
    pub alpha: AlphaRule,
    pub gamma: f64,
    pub margins: MarginRule,
    pub detach_z: bool,
    pub margin_on: bool,
    pub weight_on: bool,
    pub z_source: ZSource,
    pub ood_hinge: OodHinge,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            variant: Variant::BalancedEnergy,
            temperature: 1.0,
            lambda: 0.1,
            alpha: AlphaRule::Beta(0.05),
            gamma: 0.75,
            margins: MarginRule::Percentile { id: 80.0, ood: 20.0 },
            detach_z: true,
            margin_on: true,
            weight_on: true,
            z_source: ZSource::Live,
            ood_hinge: OodHinge::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneHyper {
    pub epochs: usize,
    pub batch_in: usize,
    pub batch_out: usize,
    pub lr0: f64,
    pub freeze: FreezeSpec,
}

impl Default for FinetuneHyper {
    fn default() -> Self {
        FinetuneHyper { epochs: 20, batch_in: 128, batch_out: 256, lr0: 1e-3, freeze: FreezeSpec::HeadOnly }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub score: ScoreKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    pub gammas: Vec<f64>,
    /// Run the four {margin, weight} on/off cells for every gamma.
    pub ablation_grid: bool,
    /// Add an EnergyOE baseline cell.
    pub include_baseline: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { gammas: vec![0.25, 0.5, 0.75, 1.0], ablation_grid: false, include_baseline: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainHyper,
    pub prior: PriorOptions,
    pub loss: LossOptions,
    pub finetune: FinetuneHyper,
    pub eval: EvalOptions,
    pub seeds: Vec<u64>,
    pub sweep: SweepOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainHyper::default(),
            prior: PriorOptions::default(),
            loss: LossOptions::default(),
            finetune: FinetuneHyper::default(),
            eval: EvalOptions::default(),
            seeds: (0..6).collect(),
            sweep: SweepOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::read_to_string(path)?)
    }

    /// The fully materialized config as JSON.
    pub fn to_json(&self) -> Result<String> {
        crate::numfmt::to_json(self)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.dim == 0 || d.num_classes < 2 {
            return Err(invalid("data.dim must be >= 1 and data.num_classes >= 2"));
        }
        if !(d.rho >= 1.0) || !d.rho.is_finite() {
            return Err(invalid(format!("data.rho must be >= 1, got {}", d.rho)));
        }
        if !(d.class_scale > 0.0) || !(d.mean_radius >= 0.0) {
            return Err(invalid("data.class_scale must be > 0 and data.mean_radius >= 0"));
        }
        if d.n_test_per_class == 0 || d.n_val_per_class == 0 || d.n_test_ood == 0 || d.n_val_ood == 0 || d.aux.n == 0 {
            return Err(invalid("every generated split needs at least one sample"));
        }
        if let AffinityRule::Explicit(a) = &d.aux.affinity {
            let s: f64 = a.iter().sum();
            if a.len() != d.num_classes || a.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(invalid("data.aux.affinity must be K nonnegative entries summing to 1"));
            }
        }
        self.data.spec(0).validate().map_err(|e| invalid(e.to_string()))?;
        if self.model.hidden.contains(&0) {
            return Err(invalid("model.hidden sizes must be >= 1"));
        }
        if self.pretrain.batch_size == 0 || self.finetune.batch_in == 0 || self.finetune.batch_out == 0 {
            return Err(invalid("batch sizes must be >= 1"));
        }
        if !(self.pretrain.lr0 >= 0.0) || !(self.finetune.lr0 >= 0.0) {
            return Err(invalid("learning rates must be >= 0"));
        }
        if let Some(eps) = self.prior.epsilon {
            if !(eps >= 0.0) || !eps.is_finite() {
                return Err(invalid("prior.epsilon must be finite and >= 0"));
            }
        }
        let l = &self.loss;
        if !(l.temperature > 0.0) || !(l.lambda >= 0.0) || !l.gamma.is_finite() {
            return Err(invalid("loss needs temperature > 0, lambda >= 0 and finite gamma"));
        }
        match l.alpha {
            AlphaRule::Value(a) if !(a >= 0.0) || !a.is_finite() => {
                return Err(invalid("loss.alpha.value must be >= 0"))
            }
            AlphaRule::Beta(b) if !(b >= 0.0) || !b.is_finite() => return Err(invalid("loss.alpha.beta must be >= 0")),
            _ => {}
        }
        if let MarginRule::Percentile { id, ood } = l.margins {
            if !(0.0..=100.0).contains(&id) || !(0.0..=100.0).contains(&ood) {
                return Err(invalid("margin percentiles must lie in [0, 100]"));
            }
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds must list at least one seed"));
        }
        Ok(())
    }
}
