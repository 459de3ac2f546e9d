use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Example;
use crate::checkpoint::{Checkpoint, Tensor};
use crate::error::{Error, Result};

/// Dense layer `z = W x + b` with `W` stored row-major as `outputs x inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn w(&self, row: usize, col: usize) -> f64 {
        self.weight[row * self.inputs + col]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

pub fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Feed-forward classifier: tanh between affine layers, linear readout,
/// softmax cross-entropy loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    layers: Vec<Affine>,
}

/// Per-parameter gradients, laid out exactly like the model's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Affine>,
}

impl Gradients {
    pub fn zeros_like(model: &ToyModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Affine::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|x| *x *= c);
            l.bias.iter_mut().for_each(|x| *x *= c);
        }
    }

    /// `(name, values)` pairs using the model's parameter names.
    pub fn named(&self) -> Vec<(String, &[f64])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, l)| {
                [
                    (weight_name(k), l.weight.as_slice()),
                    (bias_name(k), l.bias.as_slice()),
                ]
            })
            .collect()
    }
}

struct Trace {
    /// Input to each layer; `inputs[0]` is the example itself.
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn log_softmax_at(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[y] - lse
}

impl ToyModel {
    pub fn new(layers: Vec<Affine>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a model needs at least one layer".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(Error::Shape(format!("layer {k} has a zero dimension")));
            }
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Shape(format!("layer {k} buffers disagree with its dims")));
            }
        }
        if let Some(k) = (1..layers.len()).find(|&k| layers[k - 1].outputs != layers[k].inputs) {
            return Err(Error::Shape(format!(
                "layer {} emits {} features but layer {k} expects {}",
                k - 1,
                layers[k - 1].outputs,
                layers[k].inputs
            )));
        }
        Ok(Self { layers })
    }

    /// Gaussian (Glorot-scaled) weights and zero biases; `sizes` lists the
    /// input width, hidden widths and class count.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Shape("need at least input and output sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let std = (2.0 / (inputs + outputs) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut layer = Affine::zeros(inputs, outputs);
                layer.weight.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                layer
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Affine] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        if ex.x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                ex.x.len(),
                self.input_dim()
            )));
        }
        if ex.y >= self.num_classes() {
            return Err(Error::Shape(format!(
                "label {} out of range for {} classes",
                ex.y,
                self.num_classes()
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            inputs.push(h);
            h = if k == last {
                z
            } else {
                z.into_iter().map(f64::tanh).collect()
            };
        }
        Trace { inputs, logits: h }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(self.trace(x).logits)
    }

    /// Arg-max class; the lowest index wins ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let logits = self.logits(x)?;
        let mut best = 0;
        for (c, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// Layer inputs for `x`: the example, then each hidden activation.
    pub fn layer_inputs(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.logits(x)?;
        Ok(self.trace(x).inputs)
    }

    /// `-log p(y | x)` under a softmax over the readout.
    pub fn loss(&self, ex: &Example) -> Result<f64> {
        self.check_example(ex)?;
        Ok(-log_softmax_at(&self.trace(&ex.x).logits, ex.y))
    }

    /// Exact reverse-mode gradient of [`ToyModel::loss`].
    pub fn gradients(&self, ex: &Example) -> Result<Gradients> {
        self.check_example(ex)?;
        let trace = self.trace(&ex.x);
        let logits = &trace.logits;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        // dL/dz for the readout: softmax minus one-hot.
        let mut dz: Vec<f64> = exps.iter().map(|e| e / total).collect();
        dz[ex.y] -= 1.0;

        let mut grads = Gradients::zeros_like(self);
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &trace.inputs[k];
            let g = &mut grads.layers[k];
            for (j, &dzj) in dz.iter().enumerate() {
                g.bias[j] = dzj;
                let row = &mut g.weight[j * layer.inputs..(j + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(w, &a)| *w = dzj * a);
            }
            if k > 0 {
                // Back through W, then through tanh: d tanh = 1 - tanh^2.
                dz = (0..layer.inputs)
                    .map(|i| {
                        let back: f64 = dz.iter().enumerate().map(|(j, d)| d * layer.w(j, i)).sum();
                        back * (1.0 - input[i] * input[i])
                    })
                    .collect();
            }
        }
        Ok(grads)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors = self.layers.iter().enumerate().flat_map(|(k, l)| {
            [
                Tensor::f64(weight_name(k), vec![l.outputs, l.inputs], l.weight.clone()),
                Tensor::f64(bias_name(k), vec![l.outputs], l.bias.clone()),
            ]
        });
        Checkpoint::from_tensors(tensors.map(|t| t.expect("layer buffers match dims")))
            .expect("parameter names are unique")
    }

    /// Rebuilds a model from `layer{k}.weight` / `layer{k}.bias` tensors.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut layers = Vec::new();
        for k in 0.. {
            let (wn, bn) = (weight_name(k), bias_name(k));
            let Some(wmeta) = ckpt.meta(&wn) else { break };
            let [outputs, inputs] = wmeta.shape[..] else {
                return Err(Error::Shape(format!("`{wn}` must be 2-D, got {:?}", wmeta.shape)));
            };
            let bmeta = ckpt
                .meta(&bn)
                .ok_or_else(|| Error::Shape(format!("`{bn}` missing")))?;
            if bmeta.shape != [outputs] {
                return Err(Error::Shape(format!("`{bn}` must have shape [{outputs}]")));
            }
            layers.push(Affine {
                inputs,
                outputs,
                weight: ckpt.values(&wn)?.to_f64_vec(),
                bias: ckpt.values(&bn)?.to_f64_vec(),
            });
        }
        if layers.len() * 2 != ckpt.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} tensors, expected {} for a {}-layer model",
                ckpt.len(),
                layers.len() * 2,
                layers.len()
            )));
        }
        Self::new(layers)
    }
}

pub fn forward_loss(model: &ToyModel, example: &Example) -> Result<f64> {
    model.loss(example)
}

pub fn backward(model: &ToyModel, example: &Example) -> Result<Gradients> {
    model.gradients(example)
}
