//! Fully connected feed-forward network with rectifier hidden layers and a
//! logistic output layer, trained by mini-batch SGD on binary cross-entropy.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::derive_rng;
use crate::score::Hypothesis;

/// Hidden layer widths used by both detection and localization heads.
pub const HIDDEN_LAYERS: [usize; 3] = [200, 100, 50];

/// Probabilities are clipped to `[PROB_CLIP, 1 − PROB_CLIP]` when the loss
/// value is reported.
pub const PROB_CLIP: f64 = 1e-12;

/// `[m, 200, 100, 50, out]`.
pub fn detector_layout(inputs: usize, outputs: usize) -> Vec<usize> {
    let mut sizes = vec![inputs];
    sizes.extend_from_slice(&HIDDEN_LAYERS);
    sizes.push(outputs);
    sizes
}

/// Logistic function, kept strictly inside (0, 1) even for saturated inputs.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Cross-entropy of a logit against a binary target, computed from the logit
/// to stay finite, with the probability clip applied.
#[inline]
fn logit_bce(z: f64, y: f64) -> f64 {
    let raw = z.max(0.0) - z * y + libm::log1p(libm::exp(-z.abs()));
    raw.min(-libm::log(PROB_CLIP))
}

/// Dense layer with `outputs × inputs` row-major weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.biases.iter().enumerate().map(|(o, b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        }));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    seed: u64,
}

/// Glorot-uniform weights, zero biases.
pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Mlp> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(invalid(
            "layer_sizes",
            "need at least an input and an output layer, all non-empty",
        ));
    }
    let mut rng = derive_rng(seed, 0);
    let layers = layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            let mut layer = Layer::zeros(fan_in, fan_out);
            for v in &mut layer.weights {
                *v = limit * (2.0 * rng.gen::<f64>() - 1.0);
            }
            layer
        })
        .collect();
    Ok(Mlp { layers, seed })
}

/// One training row. `mask[o] == false` removes output `o` from the loss
/// (padded localization slots).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Example {
    pub fn new(input: Vec<f64>, target: Vec<f64>) -> Self {
        let mask = vec![true; target.len()];
        Self {
            input,
            target,
            mask,
        }
    }
}

impl Mlp {
    /// Builds a network from explicit layers (used by deserialization).
    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layers"));
        }
        for (a, b) in layers.iter().zip(layers.iter().skip(1)) {
            if a.outputs != b.inputs {
                return Err(Error::DimensionMismatch {
                    expected: a.outputs,
                    actual: b.inputs,
                });
            }
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(invalid("layers", "parameter counts do not match layer sizes"));
            }
        }
        Ok(Self { layers, seed })
    }

    /// Network of the given shape with every parameter zero.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        let mut m = init(layer_sizes, 0)?;
        m.layers.iter_mut().for_each(|l| l.weights.fill(0.0));
        Ok(m)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].inputs];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layer_sizes() == other.layer_sizes()
    }

    /// Parameters in serialization order: per layer, weights then biases.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().copied().collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        for (p, v) in self.params_mut().zip(flat) {
            *p = *v;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    /// `‖self − other‖∞` over all parameters.
    pub fn max_abs_diff(&self, other: &Mlp) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(invalid("model", "shapes differ"));
        }
        Ok(self
            .params()
            .zip(other.params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Pre-activations of every layer.
    fn logits_per_layer(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = input.to_vec();
        let last = self.layers.len() - 1;
        for (h, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine_into(&act, &mut z);
            if h < last {
                act.clear();
                act.extend(z.iter().map(|v| v.max(0.0)));
            }
            pre.push(z);
        }
        pre
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.inputs(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    /// Rectifier hidden layers, sigmoid outputs.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut pre = self.logits_per_layer(input);
        let out = pre.pop().unwrap_or_default();
        Ok(out.into_iter().map(sigmoid).collect())
    }

    /// Convex combination `(1 − μ)·self + μ·other`, in place.
    pub fn blend(&mut self, other: &Mlp, mu: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(invalid("model", "cannot merge models of different shapes"));
        }
        for (a, b) in self.params_mut().zip(other.params()) {
            *a = (1.0 - mu) * *a + mu * b;
        }
        Ok(())
    }

    /// Mean masked cross-entropy over the batch and its gradient. The
    /// gradient is that of the unclipped loss; the clip only bounds the
    /// reported value for saturated, wrong predictions.
    pub fn loss_and_grad(&self, batch: &[Example]) -> Result<(f64, Mlp)> {
        let mut grad = self.zeroed_like();
        let loss = self.accumulate(batch, &mut grad)?;
        Ok((loss, grad))
    }

    fn zeroed_like(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
            seed: self.seed,
        }
    }

    fn accumulate(&self, batch: &[Example], grad: &mut Mlp) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let out_dim = self.outputs();
        let mut active = 0usize;
        for ex in batch {
            self.check_input(&ex.input)?;
            for len in [ex.target.len(), ex.mask.len()] {
                if len != out_dim {
                    return Err(Error::DimensionMismatch {
                        expected: out_dim,
                        actual: len,
                    });
                }
            }
            if ex.target.iter().any(|&y| y != 0.0 && y != 1.0) {
                return Err(invalid("target", "labels must be 0 or 1"));
            }
            active += ex.mask.iter().filter(|&&m| m).count();
        }
        if active == 0 {
            return Err(Error::Empty("unmasked outputs"));
        }
        let norm = 1.0 / active as f64;
        let last = self.layers.len() - 1;
        let mut loss = 0.0;
        for ex in batch {
            let pre = self.logits_per_layer(&ex.input);
            let mut delta: Vec<f64> = pre[last]
                .iter()
                .zip(&ex.target)
                .zip(&ex.mask)
                .map(|((&z, &y), &m)| {
                    if m {
                        loss += logit_bce(z, y);
                        (sigmoid(z) - y) * norm
                    } else {
                        0.0
                    }
                })
                .collect();
            for h in (0..=last).rev() {
                let layer = &self.layers[h];
                let g = &mut grad.layers[h];
                let input_act: Vec<f64> = if h == 0 {
                    ex.input.clone()
                } else {
                    pre[h - 1].iter().map(|v| v.max(0.0)).collect()
                };
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.biases[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, a) in row.iter_mut().zip(&input_act) {
                        *gw += d * a;
                    }
                }
                if h == 0 {
                    break;
                }
                let mut prev = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                for (p, z) in prev.iter_mut().zip(&pre[h - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(loss * norm)
    }

    /// One SGD step on `batch`; returns the batch loss before the step.
    pub fn sgd_step(&mut self, batch: &[Example], learning_rate: f64) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(batch)?;
        for (p, g) in self.params_mut().zip(grad.params()) {
            *p -= learning_rate * g;
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// One pass over `data` in shuffled mini-batches; returns the mean batch loss.
pub fn sgd_epoch<R: Rng + ?Sized>(
    mlp: &mut Mlp,
    data: &[Example],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    let mut batch = Vec::with_capacity(config.batch_size);
    for chunk in order.chunks(config.batch_size) {
        batch.clear();
        batch.extend(chunk.iter().map(|&i| data[i].clone()));
        total += mlp.sgd_step(&batch, config.learning_rate)?;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Trains for epochs `start_epoch..config.epochs`. Epoch `e` shuffles with a
/// generator derived from `(config.seed, e)`, so a run resumed from a saved
/// model at epoch `e` continues exactly as the uninterrupted run would.
pub fn train_from(mlp: &mut Mlp, data: &[Example], config: &TrainConfig, start_epoch: usize) -> Result<Vec<f64>> {
    (start_epoch..config.epochs)
        .map(|e| sgd_epoch(mlp, data, config, &mut derive_rng(config.seed, e as u64)))
        .collect()
}

pub fn train(mlp: &mut Mlp, data: &[Example], config: &TrainConfig) -> Result<Vec<f64>> {
    train_from(mlp, data, config, 0)
}

/// Detection head output `ỹ` and its decision `ỹ > δ`.
pub fn nd_predict(mlp: &Mlp, input: &[f64], threshold: f64) -> Result<(f64, Hypothesis)> {
    let out = mlp.forward(input)?;
    if out.len() != 1 {
        return Err(invalid("model", "detection head must have a single output"));
    }
    let decision = if out[0] > threshold {
        Hypothesis::H1
    } else {
        Hypothesis::H0
    };
    Ok((out[0], decision))
}

/// Localization head outputs `z̃_ij` with decisions `z̃ > ε`; padded slots
/// (`slot_mask[s] == false`) produce no verdict.
pub fn nl_predict(
    mlp: &Mlp,
    input: &[f64],
    threshold: f64,
    slot_mask: &[bool],
) -> Result<Vec<Option<(f64, Hypothesis)>>> {
    let out = mlp.forward(input)?;
    if slot_mask.len() != out.len() {
        return Err(Error::DimensionMismatch {
            expected: out.len(),
            actual: slot_mask.len(),
        });
    }
    Ok(out
        .into_iter()
        .zip(slot_mask)
        .map(|(z, &keep)| {
            keep.then(|| {
                let h = if z > threshold {
                    Hypothesis::H1
                } else {
                    Hypothesis::H0
                };
                (z, h)
            })
        })
        .collect())
}
