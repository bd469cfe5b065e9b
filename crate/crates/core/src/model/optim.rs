use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, LayerGrad, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments plus the cosine schedule position.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: usize,
    pub lr0: f64,
    pub total_steps: usize,
    pub params: AdamParams,
    first: Vec<Option<LayerGrad>>,
    second: Vec<Option<LayerGrad>>,
}

impl OptimizerState {
    /// Fresh state with zero moments for every unfrozen layer of `model`.
    pub fn new(model: &Mlp, lr0: f64, total_steps: usize, params: AdamParams) -> Result<Self> {
        if !(lr0 >= 0.0) || !lr0.is_finite() {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {lr0}")));
        }
        let zeros: Vec<Option<LayerGrad>> = model
            .layers()
            .iter()
            .zip(model.frozen())
            .map(|(l, &frozen)| {
                (!frozen).then(|| LayerGrad { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
            })
            .collect();
        Ok(OptimizerState { step: 0, lr0, total_steps, params, first: zeros.clone(), second: zeros })
    }
}

/// `lr0 * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_lr(s: &OptimizerState) -> Result<f64> {
    if s.step > s.total_steps {
        return Err(Error::invalid(format!("step {} is past the schedule end {}", s.step, s.total_steps)));
    }
    if s.total_steps == 0 {
        return Ok(s.lr0);
    }
    Ok(s.lr0 * 0.5 * (1.0 + (PI * s.step as f64 / s.total_steps as f64).cos()))
}

/// One bias-corrected Adam update of every unfrozen layer.
pub fn adam_step(model: &mut Mlp, grads: &Gradients, s: &mut OptimizerState) -> Result<()> {
    let n = model.layers().len();
    if grads.layers.len() != n || s.first.len() != n {
        return Err(Error::invalid("gradient/optimizer layout does not match the model"));
    }
    let lr = cosine_lr(s)?;
    let t = (s.step + 1) as i32;
    let AdamParams { beta1, beta2, eps } = s.params;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let frozen = model.frozen().to_vec();
    for (l, layer) in model.layers_mut().iter_mut().enumerate() {
        if frozen[l] {
            continue;
        }
        let (Some(g), Some(m), Some(v)) = (&grads.layers[l], &mut s.first[l], &mut s.second[l]) else {
            return Err(Error::invalid(format!("missing gradient or moments for trainable layer {l}")));
        };
        if g.weights.len() != layer.weights.len() || g.bias.len() != layer.bias.len() {
            return Err(Error::invalid(format!("gradient shape mismatch in layer {l}")));
        }
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        };
        update(&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights);
        update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias);
    }
    s.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    fn state(step: usize, total: usize) -> OptimizerState {
        let m = Mlp::init(&[2, 2], Activation::Tanh, 0).unwrap();
        let mut s = OptimizerState::new(&m, 0.01, total, AdamParams::default()).unwrap();
        s.step = step;
        s
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(&state(0, 100)).unwrap(), 0.01);
        assert!(cosine_lr(&state(100, 100)).unwrap().abs() < 1e-18);
        assert!((cosine_lr(&state(50, 100)).unwrap() - 0.005).abs() < 1e-15);
        assert!(cosine_lr(&state(101, 100)).is_err());
    }

    fn grads_like(m: &Mlp, value: f64) -> Gradients {
        Gradients {
            layers: m
                .layers()
                .iter()
                .zip(m.frozen())
                .map(|(l, &f)| {
                    (!f).then(|| LayerGrad {
                        weights: (0..l.weights.len()).map(|i| value * (i as f64 - 1.5)).collect(),
                        bias: vec![value; l.bias.len()],
                    })
                })
                .collect(),
        }
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let mut m = Mlp::init(&[2, 3, 2], Activation::Tanh, 4).unwrap();
        let before = m.clone();
        let g = grads_like(&m, 0.3);
        let mut s = OptimizerState::new(&m, 0.001, 10, AdamParams::default()).unwrap();
        adam_step(&mut m, &g, &mut s).unwrap();
        assert_eq!(s.step, 1);
        for ((a, b), gl) in before.layers().iter().zip(m.layers()).zip(&g.layers) {
            let gl = gl.as_ref().unwrap();
            for ((pa, pb), gv) in a.weights.iter().zip(&b.weights).zip(&gl.weights) {
                let expected = -0.001 * gv / (gv.abs() + 1e-8);
                assert!((pb - pa - expected).abs() < 1e-15, "{} vs {}", pb - pa, expected);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = Mlp::init(&[2, 3, 2], Activation::Tanh, 4).unwrap();
        let before = m.clone();
        let g = grads_like(&m, 0.0);
        let mut s = OptimizerState::new(&m, 0.1, 10, AdamParams::default()).unwrap();
        adam_step(&mut m, &g, &mut s).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn frozen_layer_is_untouched() {
        let mut m = Mlp::init(&[2, 3, 2], Activation::Tanh, 4).unwrap();
        m.set_frozen(&[true, false]).unwrap();
        let before = m.clone();
        let mut g = grads_like(&m, 1.0);
        let mut s = OptimizerState::new(&m, 0.1, 10, AdamParams::default()).unwrap();
        adam_step(&mut m, &g, &mut s).unwrap();
        assert_eq!(m.layers()[0], before.layers()[0]);
        assert_ne!(m.layers()[1], before.layers()[1]);
        // a stray gradient for the frozen layer is ignored
        g.layers[0] = g.layers[1].clone();
        adam_step(&mut m, &g, &mut s).unwrap();
        assert_eq!(m.layers()[0], before.layers()[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut m = Mlp::init(&[2, 3, 2], Activation::Tanh, 4).unwrap();
        let mut s = OptimizerState::new(&m, 0.1, 10, AdamParams::default()).unwrap();
        let g = Gradients { layers: vec![None] };
        assert!(adam_step(&mut m, &g, &mut s).is_err());
    }
}
