use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Logits;
use crate::numfmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Dense affine layer `y = W x + b`, `W` stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.inputs + col]
    }

    fn affine_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.weights.chunks_exact(self.inputs).zip(&self.bias)) {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Parameter gradient of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(layer: &Layer) -> Self {
        LayerGrad { weights: vec![0.0; layer.weights.len()], bias: vec![0.0; layer.bias.len()] }
    }
}

/// Gradients for every layer; `None` marks a frozen layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrad>>,
}

impl Gradients {
    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(Option::is_none)
    }
}

/// Saved activations of a batched forward pass.
pub struct Tape {
    batch: usize,
    /// `acts[l]` is the (batch x dims[l]) input of layer `l`; the last entry holds the logits.
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn logits(&self) -> Result<Vec<Logits>> {
        let out = self.acts.last().expect("tape has outputs");
        let k = out.len() / self.batch.max(1);
        out.chunks_exact(k).map(|row| Logits::new(row.to_vec())).collect()
    }
}

/// Feed-forward classifier `R^D -> R^K` with a shared hidden activation and a
/// linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    layers: Vec<Layer>,
    frozen: Vec<bool>,
}

impl Mlp {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = crate::rng::stream(seed, crate::rng::tags::INIT);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    inputs: fan_in,
                    outputs: fan_out,
                    weights: (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect(),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect::<Vec<_>>();
        Ok(Mlp { dims: dims.to_vec(), activation, frozen: vec![false; layers.len()], layers })
    }

    pub fn from_layers(activation: Activation, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        let mut dims = vec![layers[0].inputs];
        for (i, l) in layers.iter().enumerate() {
            if l.inputs != *dims.last().unwrap() {
                return Err(Error::invalid(format!(
                    "layer {i} expects {} inputs but previous layer emits {}",
                    l.inputs,
                    dims.last().unwrap()
                )));
            }
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::invalid(format!("layer {i} parameter shapes are inconsistent")));
            }
            dims.push(l.outputs);
        }
        validate_dims(&dims)?;
        if layers.iter().any(|l| l.weights.iter().chain(&l.bias).any(|v| !v.is_finite())) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(Mlp { frozen: vec![false; layers.len()], dims, activation, layers })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn set_frozen(&mut self, frozen: &[bool]) -> Result<()> {
        if frozen.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "freeze mask has {} entries for {} layers",
                frozen.len(),
                self.layers.len()
            )));
        }
        self.frozen = frozen.to_vec();
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!("input has {} features, model expects {}", x.len(), self.input_dim())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Logits> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.outputs];
            layer.affine_into(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            cur = next;
        }
        Logits::new(cur)
    }

    /// Forward pass over a batch, recording what `backward` needs.
    pub fn forward_batch<X: AsRef<[f64]>>(&self, xs: &[X]) -> Result<Tape> {
        let batch = xs.len();
        let mut input = Vec::with_capacity(batch * self.input_dim());
        for x in xs {
            self.check_input(x.as_ref())?;
            input.extend_from_slice(x.as_ref());
        }
        let mut acts = vec![input];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = acts.last().unwrap();
            let mut out = vec![0.0; batch * layer.outputs];
            for (x, o) in prev.chunks_exact(layer.inputs).zip(out.chunks_exact_mut(layer.outputs)) {
                layer.affine_into(x, o);
            }
            if i < last {
                out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            acts.push(out);
        }
        Ok(Tape { batch, acts })
    }

    /// Reverse-mode pass: `grad_logits[n]` is dLoss/dlogits of sample `n`.
    /// Frozen layers get no gradient and backpropagation stops below the
    /// lowest trainable layer.
    pub fn backward(&self, tape: &Tape, grad_logits: &[Vec<f64>]) -> Result<Gradients> {
        if grad_logits.len() != tape.batch {
            return Err(Error::invalid(format!("{} logit gradients for a batch of {}", grad_logits.len(), tape.batch)));
        }
        let k = self.num_classes();
        let mut delta = Vec::with_capacity(tape.batch * k);
        for g in grad_logits {
            if g.len() != k {
                return Err(Error::invalid(format!("logit gradient has {} entries, expected {k}", g.len())));
            }
            delta.extend_from_slice(g);
        }
        let lowest_trainable = match self.frozen.iter().position(|f| !f) {
            Some(i) => i,
            None => return Ok(Gradients { layers: vec![None; self.layers.len()] }),
        };
        let mut grads: Vec<Option<LayerGrad>> = vec![None; self.layers.len()];
        for l in (lowest_trainable..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &tape.acts[l];
            if !self.frozen[l] {
                let mut g = LayerGrad::zeros_like(layer);
                for (d, x) in delta.chunks_exact(layer.outputs).zip(input.chunks_exact(layer.inputs)) {
                    for (o, &dv) in d.iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        g.bias[o] += dv;
                        let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (w, &xv) in row.iter_mut().zip(x) {
                            *w += dv * xv;
                        }
                    }
                }
                grads[l] = Some(g);
            }
            if l == lowest_trainable {
                break;
            }
            // propagate through W and the activation that produced `input`
            let mut prev = vec![0.0; tape.batch * layer.inputs];
            for (d, p) in delta.chunks_exact(layer.outputs).zip(prev.chunks_exact_mut(layer.inputs)) {
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (pv, &w) in p.iter_mut().zip(row) {
                        *pv += dv * w;
                    }
                }
            }
            for (pv, &y) in prev.iter_mut().zip(input) {
                *pv *= self.activation.derivative_from_output(y);
            }
            delta = prev;
        }
        Ok(Gradients { layers: grads })
    }

    /// Runs `loss` on the batch logits and backpropagates its logit gradients.
    pub fn value_and_grad<X, F>(&self, xs: &[X], loss: F) -> Result<(f64, Gradients)>
    where
        X: AsRef<[f64]>,
        F: FnOnce(&[Logits]) -> Result<(f64, Vec<Vec<f64>>)>,
    {
        let tape = self.forward_batch(xs)?;
        let logits = tape.logits()?;
        let (value, grad_logits) = loss(&logits)?;
        Ok((value, self.backward(&tape, &grad_logits)?))
    }

    pub fn to_json(&self) -> Result<String> {
        numfmt::to_json(&MlpFile::from(self))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: MlpFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = crate::read_to_string(path)?;
        Self::from_json(&s)
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::invalid(format!("dims {dims:?}: need at least an input and an output size")));
    }
    if dims.contains(&0) {
        return Err(Error::invalid(format!("dims {dims:?}: every size must be >= 1")));
    }
    if *dims.last().unwrap() < 2 {
        return Err(Error::invalid("a classifier needs K >= 2 outputs"));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    dims: Vec<usize>,
    activation: Activation,
    frozen: Vec<bool>,
    layers: Vec<LayerFile>,
}

impl From<&Mlp> for MlpFile {
    fn from(m: &Mlp) -> Self {
        MlpFile {
            dims: m.dims.clone(),
            activation: m.activation,
            frozen: m.frozen.clone(),
            layers: m
                .layers
                .iter()
                .map(|l| LayerFile {
                    w: l.weights.chunks_exact(l.inputs).map(<[f64]>::to_vec).collect(),
                    b: l.bias.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<MlpFile> for Mlp {
    type Error = Error;

    fn try_from(f: MlpFile) -> Result<Self> {
        let layers = f
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let inputs = l.w.first().map_or(0, Vec::len);
                if l.w.iter().any(|row| row.len() != inputs) {
                    return Err(Error::invalid(format!("layer {i} has ragged weight rows")));
                }
                Ok(Layer { inputs, outputs: l.w.len(), weights: l.w.concat(), bias: l.b })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut m = Mlp::from_layers(f.activation, layers)?;
        if m.dims != f.dims {
            return Err(Error::invalid(format!("declared dims {:?} disagree with layer shapes {:?}", f.dims, m.dims)));
        }
        m.set_frozen(&f.frozen)?;
        Ok(m)
    }
}
