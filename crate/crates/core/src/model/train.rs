//! Standard pretraining and prior-aware fine-tuning.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp};
use super::optim::{adam_step, AdamParams, OptimizerState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy_batch, total_objective_with_z, LossConfig, LossTerms, Variant, ZSource};
use crate::math::softmax;
use crate::prior::{z_gamma, OodPrior};
use crate::rng::{stream, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamParams,
}

/// Which layers stay fixed during fine-tuning.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeSpec {
    /// Train only the final linear layer.
    #[default]
    HeadOnly,
    /// Train every layer.
    None,
    /// Explicit per-layer flags (`true` = frozen).
    Mask(Vec<bool>),
}

impl FreezeSpec {
    pub fn mask(&self, num_layers: usize) -> Result<Vec<bool>> {
        let mask = match self {
            FreezeSpec::HeadOnly => (0..num_layers).map(|i| i + 1 != num_layers).collect(),
            FreezeSpec::None => vec![false; num_layers],
            FreezeSpec::Mask(m) => {
                if m.len() != num_layers {
                    return Err(Error::invalid(format!("freeze mask has {} entries for {num_layers} layers", m.len())));
                }
                m.clone()
            }
        };
        if mask.iter().all(|&f| f) {
            return Err(Error::invalid("freeze spec leaves no trainable layer"));
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_in: usize,
    pub batch_out: usize,
    pub lr0: f64,
    pub freeze: FreezeSpec,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(flatten)]
    pub terms: LossTerms,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,ce,l_in_hinge,l_out\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                crate::numfmt::g17(r.loss),
                crate::numfmt::g17(r.terms.ce),
                crate::numfmt::g17(r.terms.l_in_hinge),
                crate::numfmt::g17(r.terms.l_out)
            ));
        }
        out
    }
}

fn ensure_finite(value: f64, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("loss became {value} in epoch {epoch}")))
    }
}

fn gather<'a>(data: &'a Dataset, idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter().map(|&i| data.features[i].as_slice()).collect()
}

/// Cross-entropy training from a fresh seeded initialization.
pub fn pretrain_standard(data: &Dataset, num_classes: usize, cfg: &PretrainConfig) -> Result<(Mlp, TrainTrace)> {
    if data.is_empty() {
        return Err(Error::empty("pretraining dataset is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let labels = data.class_labels()?;
    if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range for K = {num_classes}")));
    }
    let mut dims = vec![data.dim()];
    dims.extend(&cfg.hidden);
    dims.push(num_classes);
    let mut model = Mlp::init(&dims, cfg.activation, cfg.seed)?;
    let mut trace = TrainTrace::default();
    if cfg.epochs == 0 {
        return Ok((model, trace));
    }
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut opt = OptimizerState::new(&model, cfg.lr0, cfg.epochs * per_epoch, cfg.adam)?;
    let mut rng = stream(cfg.seed, tags::PRETRAIN);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xs = gather(data, chunk);
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (value, grads) = model.value_and_grad(&xs, |logits| {
                let r = cross_entropy_batch(logits, &ys)?;
                Ok((r.value, r.grad))
            })?;
            ensure_finite(value, epoch)?;
            sum += value;
            adam_step(&mut model, &grads, &mut opt)?;
        }
        let mean = sum / per_epoch as f64;
        trace.epochs.push(EpochRecord { epoch, loss: mean, terms: LossTerms { ce: mean, ..LossTerms::default() } });
    }
    Ok((model, trace))
}

/// Endless reshuffled pass over the auxiliary indices.
struct WrapSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl WrapSampler {
    fn new(n: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        WrapSampler { order, cursor: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

/// Fine-tunes the unfrozen layers of a pretrained model on the regularized
/// objective. The prior must come from the same pretrained model and stays
/// fixed throughout. An epoch is one pass over `data_in`; `data_out` is
/// sampled with wrap-around reshuffling. The returned model keeps the input
/// model's freeze flags.
pub fn finetune_balanced(
    model: &Mlp,
    data_in: &Dataset,
    data_out: &Dataset,
    prior: Option<&OodPrior>,
    loss: &LossConfig,
    cfg: &FinetuneConfig,
) -> Result<(Mlp, TrainTrace)> {
    loss.validate()?;
    let mask = cfg.freeze.mask(model.layers().len())?;
    if data_in.is_empty() || data_out.is_empty() {
        return Err(Error::empty("fine-tuning needs nonempty ID and OOD sets"));
    }
    if cfg.batch_in == 0 || cfg.batch_out == 0 {
        return Err(Error::invalid("batch sizes must be >= 1"));
    }
    let k = model.num_classes();
    if loss.variant == Variant::BalancedEnergy {
        let p = prior.ok_or_else(|| Error::invalid("balanced energy fine-tuning needs an OOD prior"))?;
        if p.num_classes != k {
            return Err(Error::invalid(format!("prior has K = {} but the model has K = {k}", p.num_classes)));
        }
        if p.gamma != loss.gamma {
            return Err(Error::invalid(format!("prior gamma {} differs from loss gamma {}", p.gamma, loss.gamma)));
        }
    }
    let labels = data_in.class_labels()?;
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for K = {k}")));
    }
    let mut trace = TrainTrace::default();
    if cfg.epochs == 0 {
        return Ok((model.clone(), trace));
    }

    let fixed_z = match (loss.variant, loss.z_source, prior) {
        (Variant::BalancedEnergy, ZSource::Pretrained, Some(p)) => Some(
            data_out.features.iter().map(|x| z_gamma(&softmax(&model.forward(x)?), p)).collect::<Result<Vec<f64>>>()?,
        ),
        _ => None,
    };

    let original_flags = model.frozen().to_vec();
    let mut net = model.clone();
    net.set_frozen(&mask)?;
    let per_epoch = data_in.len().div_ceil(cfg.batch_in);
    let mut opt = OptimizerState::new(&net, cfg.lr0, cfg.epochs * per_epoch, cfg.adam)?;
    let mut rng_in = stream(cfg.seed, tags::FINETUNE_IN);
    let mut sampler = WrapSampler::new(data_out.len(), stream(cfg.seed, tags::FINETUNE_OUT));
    let mut order: Vec<usize> = (0..data_in.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_in);
        let mut sum = 0.0;
        let mut terms = LossTerms::default();
        for chunk in order.chunks(cfg.batch_in) {
            let out_idx = sampler.next_batch(cfg.batch_out);
            let mut xs = gather(data_in, chunk);
            let n_in = xs.len();
            xs.extend(gather(data_out, &out_idx));
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let z_batch: Option<Vec<f64>> = fixed_z.as_ref().map(|z| out_idx.iter().map(|&i| z[i]).collect());
            let mut batch_terms = LossTerms::default();
            let (value, grads) = net.value_and_grad(&xs, |logits| {
                let (l_in, l_out) = logits.split_at(n_in);
                let r = total_objective_with_z(l_in, &ys, l_out, prior, loss, z_batch.as_deref())?;
                batch_terms = r.terms;
                let mut g = r.grad_logits_in;
                g.extend(r.grad_logits_out);
                Ok((r.value, g))
            })?;
            ensure_finite(value, epoch)?;
            sum += value;
            terms.ce += batch_terms.ce;
            terms.l_in_hinge += batch_terms.l_in_hinge;
            terms.l_out += batch_terms.l_out;
            adam_step(&mut net, &grads, &mut opt)?;
        }
        let n = per_epoch as f64;
        trace.epochs.push(EpochRecord {
            epoch,
            loss: sum / n,
            terms: LossTerms { ce: terms.ce / n, l_in_hinge: terms.l_in_hinge / n, l_out: terms.l_out / n },
        });
    }
    net.set_frozen(&original_flags)?;
    Ok((net, trace))
}
