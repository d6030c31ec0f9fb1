//! Logit providers used for guidance: the exact Bayes classifier of a
//! mixture, and a small fully connected network trained from scratch with
//! switchable ReLU / Softplus hidden activations.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mixture::{log_sum_exp, softmax, GaussianMixture};

/// A differentiable map from a point to `K` unnormalized logits.
pub trait Classifier: Send + Sync + fmt::Debug {
    fn num_classes(&self) -> usize;

    fn dim(&self) -> usize;

    fn logits(&self, x: &[f64]) -> Vec<f64>;

    /// Returns the logits `f(x)` together with `J_f(x)ᵀ w`, where the
    /// cotangent `w = weights(f(x))` may depend on the logits.
    fn logits_vjp(&self, x: &[f64], weights: &dyn Fn(&[f64]) -> Vec<f64>) -> (Vec<f64>, Vec<f64>);
}

/// Joint and marginal logit temperatures `τ₁`, `τ₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperedLogits {
    pub tau1: f64,
    pub tau2: f64,
}

impl TemperedLogits {
    pub fn new(tau1: f64, tau2: f64) -> Result<Self> {
        let t = Self { tau1, tau2 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau1.is_finite()) {
            return Err(invalid(format!("tau1 must be > 0, got {}", self.tau1)));
        }
        if !(self.tau2 >= 0.0 && self.tau2.is_finite()) {
            return Err(invalid(format!("tau2 must be >= 0, got {}", self.tau2)));
        }
        Ok(())
    }

    /// `τ₁ f_y − log Σ_i exp(τ₂ f_i)`.
    pub fn log_prob(&self, logits: &[f64], y: usize) -> f64 {
        let scaled: Vec<f64> = logits.iter().map(|f| self.tau2 * f).collect();
        self.tau1 * logits[y] - log_sum_exp(&scaled)
    }

    /// Cotangent of [`log_prob`](Self::log_prob) with respect to the logits:
    /// `τ₁ e_y − τ₂ softmax(τ₂ f)`.
    pub fn cotangent(&self, logits: &[f64], y: usize) -> Vec<f64> {
        let scaled: Vec<f64> = logits.iter().map(|f| self.tau2 * f).collect();
        let mut w: Vec<f64> = softmax(&scaled).into_iter().map(|p| -self.tau2 * p).collect();
        w[y] += self.tau1;
        w
    }
}

impl Default for TemperedLogits {
    fn default() -> Self {
        Self { tau1: 1.0, tau2: 0.5 }
    }
}

fn check_input(clf: &dyn Classifier, x: &[f64], y: usize) -> Result<()> {
    if x.len() != clf.dim() {
        return Err(Error::DimensionMismatch { expected: clf.dim(), got: x.len() });
    }
    if y >= clf.num_classes() {
        return Err(invalid(format!("class {y} out of range for {} classes", clf.num_classes())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite classifier input"));
    }
    Ok(())
}

/// `log p_{τ₁,τ₂}(y|x) = τ₁ f_y(x) − log Σ_i exp(τ₂ f_i(x))`.
pub fn guidance_logprob(clf: &dyn Classifier, x: &[f64], y: usize, temps: TemperedLogits) -> Result<f64> {
    check_input(clf, x, y)?;
    temps.validate()?;
    Ok(temps.log_prob(&clf.logits(x), y))
}

/// Gradient of [`guidance_logprob`] with respect to `x`, plus the logits at `x`.
pub fn guidance_grad_with_logits(
    clf: &dyn Classifier,
    x: &[f64],
    y: usize,
    temps: TemperedLogits,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_input(clf, x, y)?;
    temps.validate()?;
    let (logits, grad) = clf.logits_vjp(x, &|f| temps.cotangent(f, y));
    Ok((grad, logits))
}

/// `∇_x (τ₁ f_y(x) − log Σ_i exp(τ₂ f_i(x)))`.
pub fn guidance_grad(clf: &dyn Classifier, x: &[f64], y: usize, temps: TemperedLogits) -> Result<Vec<f64>> {
    guidance_grad_with_logits(clf, x, y, temps).map(|(g, _)| g)
}

/// Classifier whose logits are the mixture log-joints `log(b_l f_l(x))`.
#[derive(Debug, Clone)]
pub struct BayesClassifier {
    mixture: Arc<GaussianMixture>,
}

impl BayesClassifier {
    pub fn new(mixture: Arc<GaussianMixture>) -> Self {
        Self { mixture }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }
}

impl Classifier for BayesClassifier {
    fn num_classes(&self) -> usize {
        self.mixture.num_classes()
    }

    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.mixture.log_joints(x)
    }

    fn logits_vjp(&self, x: &[f64], weights: &dyn Fn(&[f64]) -> Vec<f64>) -> (Vec<f64>, Vec<f64>) {
        let logits = self.mixture.log_joints(x);
        let w = weights(&logits);
        let mut grad = vec![0.0; x.len()];
        for (c, wk) in self.mixture.components().iter().zip(&w) {
            if *wk == 0.0 {
                continue;
            }
            for (g, s) in grad.iter_mut().zip(c.natural_score(x)) {
                *g += wk * s;
            }
        }
        (logits, grad)
    }
}

/// Multiplies another classifier's logits by a constant; a factor above one
/// makes a calibrated classifier overconfident.
#[derive(Debug, Clone)]
pub struct ScaledLogits {
    inner: Arc<dyn Classifier>,
    factor: f64,
}

impl ScaledLogits {
    pub fn new(inner: Arc<dyn Classifier>, factor: f64) -> Self {
        Self { inner, factor }
    }
}

impl Classifier for ScaledLogits {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.inner.logits(x).into_iter().map(|f| f * self.factor).collect()
    }

    fn logits_vjp(&self, x: &[f64], weights: &dyn Fn(&[f64]) -> Vec<f64>) -> (Vec<f64>, Vec<f64>) {
        let factor = self.factor;
        let (inner, grad) = self.inner.logits_vjp(x, &|f| {
            let s: Vec<f64> = f.iter().map(|v| v * factor).collect();
            weights(&s).into_iter().map(|w| w * factor).collect()
        });
        (inner.into_iter().map(|f| f * factor).collect(), grad)
    }
}

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `Softplus_β(x) = log(1 + exp(βx)) / β`.
    Softplus {
        beta: f64,
    },
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Softplus { beta } => softplus(x, beta),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus { beta } => sigmoid(beta * x),
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            Activation::Softplus { beta } if !(beta > 0.0 && beta.is_finite()) => {
                Err(invalid(format!("softplus beta must be > 0, got {beta}")))
            }
            _ => Ok(()),
        }
    }
}

pub fn softplus(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / beta
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// row-major `outputs × inputs`
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// `Wᵀ δ`
    fn backward_input(&self, delta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            for (acc, w) in out.iter_mut().zip(row) {
                *acc += w * d;
            }
        }
        out
    }
}

/// Labeled points for training.
#[derive(Debug, Clone, Default)]
pub struct LabeledData {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { epochs: 200, learning_rate: 1e-2, momentum: 0.9, batch_size: 32, seed: 0 }
    }
}

/// Per-epoch mean cross-entropy.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
}

/// Fully connected network `d → h₁ → … → K` with a shared hidden activation
/// and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallNet {
    layers: Vec<Layer>,
    activation: Activation,
}

impl SmallNet {
    /// He-uniform initialization from `seed`. `sizes = [d, h₁, …, K]`.
    pub fn init(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(sizes, activation, |fan_in| {
            let bound = (6.0 / fan_in as f64).sqrt();
            rng.random_range(-bound..bound)
        })
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        Self::build(sizes, activation, |_| 0.0)
    }

    fn build(sizes: &[usize], activation: Activation, mut draw: impl FnMut(usize) -> f64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(invalid(format!("invalid layer sizes {sizes:?}")));
        }
        activation.validate()?;
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                inputs: w[0],
                outputs: w[1],
                weights: (0..w[0] * w[1]).map(|_| draw(w[0])).collect(),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Same weights, different hidden activation.
    pub fn with_activation(&self, activation: Activation) -> Result<Self> {
        activation.validate()?;
        Ok(Self { layers: self.layers.clone(), activation })
    }

    /// Pre-activations of every layer; the last entry is the logits.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            if i + 1 < self.layers.len() {
                h = z.iter().map(|v| self.activation.apply(*v)).collect();
            }
            pre.push(z);
        }
        pre
    }

    /// Backpropagates `delta` (gradient wrt logits) to the input.
    fn backward_to_input(&self, pre: &[Vec<f64>], mut delta: Vec<f64>) -> Vec<f64> {
        for i in (0..self.layers.len()).rev() {
            let back = self.layers[i].backward_input(&delta);
            if i == 0 {
                return back;
            }
            delta = back.iter().zip(&pre[i - 1]).map(|(g, z)| g * self.activation.derivative(*z)).collect();
        }
        unreachable!("network has at least one layer")
    }

    pub fn accuracy(&self, data: &LabeledData) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data
            .points
            .iter()
            .zip(&data.labels)
            .filter(|(x, y)| crate::mixture::argmax(&self.logits(x)) == **y)
            .count();
        hits as f64 / data.len() as f64
    }

    /// Mini-batch SGD with momentum on mean cross-entropy. The learning rate
    /// drops ×0.1 after two thirds of the epochs. Deterministic given
    /// `params.seed` and the data order.
    pub fn train(&mut self, data: &LabeledData, params: &TrainParams) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        if data.labels.len() != data.points.len() {
            return Err(Error::DimensionMismatch { expected: data.points.len(), got: data.labels.len() });
        }
        let k = self.num_classes();
        if let Some(l) = data.labels.iter().find(|l| **l >= k) {
            return Err(invalid(format!("label {l} out of range for {k} classes")));
        }
        if let Some(p) = data.points.iter().find(|p| p.len() != self.dim()) {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: p.len() });
        }
        if params.batch_size == 0 || !(params.learning_rate > 0.0 && params.learning_rate.is_finite()) {
            return Err(invalid("batch size and learning rate must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut velocity: Vec<(Vec<f64>, Vec<f64>)> =
            self.layers.iter().map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()])).collect();
        let decay_at = (2 * params.epochs) / 3;
        let mut report = TrainReport::default();

        for epoch in 0..params.epochs {
            let lr = if epoch >= decay_at { params.learning_rate * 0.1 } else { params.learning_rate };
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(params.batch_size) {
                let mut grads: Vec<(Vec<f64>, Vec<f64>)> =
                    self.layers.iter().map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()])).collect();
                for &idx in batch {
                    let x = &data.points[idx];
                    let y = data.labels[idx];
                    epoch_loss += self.accumulate_grad(x, y, &mut grads);
                }
                let inv = 1.0 / batch.len() as f64;
                for ((layer, (gw, gb)), (vw, vb)) in self.layers.iter_mut().zip(&grads).zip(velocity.iter_mut()) {
                    for ((w, g), v) in layer.weights.iter_mut().zip(gw).zip(vw.iter_mut()) {
                        *v = params.momentum * *v - lr * g * inv;
                        *w += *v;
                    }
                    for ((b, g), v) in layer.bias.iter_mut().zip(gb).zip(vb.iter_mut()) {
                        *v = params.momentum * *v - lr * g * inv;
                        *b += *v;
                    }
                }
            }
            let mean_loss = epoch_loss / data.len() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: mean_loss });
            }
            report.loss_curve.push(mean_loss);
        }
        Ok(report)
    }

    /// Adds the cross-entropy gradient of one sample into `grads`, returns its loss.
    fn accumulate_grad(&self, x: &[f64], y: usize, grads: &mut [(Vec<f64>, Vec<f64>)]) -> f64 {
        let pre = self.forward_trace(x);
        let logits = pre.last().expect("at least one layer");
        let lse = log_sum_exp(logits);
        let loss = lse - logits[y];
        let mut delta: Vec<f64> = logits.iter().map(|f| (f - lse).exp()).collect();
        delta[y] -= 1.0;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input: Vec<f64> =
                if i == 0 { x.to_vec() } else { pre[i - 1].iter().map(|z| self.activation.apply(*z)).collect() };
            let (gw, gb) = &mut grads[i];
            for (o, d) in delta.iter().enumerate() {
                gb[o] += d;
                if *d == 0.0 {
                    continue;
                }
                for (g, v) in gw[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(&input) {
                    *g += d * v;
                }
            }
            if i > 0 {
                delta = layer
                    .backward_input(&delta)
                    .iter()
                    .zip(&pre[i - 1])
                    .map(|(g, z)| g * self.activation.derivative(*z))
                    .collect();
            }
        }
        loss
    }

    /// Writes the self-describing text weight format.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|reason| Error::Format { path: path.display().to_string(), reason })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("guidelab-smallnet 1\n");
        let sizes: Vec<String> = self.sizes().iter().map(|s| s.to_string()).collect();
        out.push_str(&format!("sizes {}\n", sizes.join(" ")));
        match self.activation {
            Activation::Relu => out.push_str("activation relu\n"),
            Activation::Softplus { beta } => out.push_str(&format!("activation softplus {beta:e}\n")),
        }
        for (i, layer) in self.layers.iter().enumerate() {
            out.push_str(&format!("weights {i} {} {}\n", layer.outputs, layer.inputs));
            for row in layer.weights.chunks(layer.inputs) {
                out.push_str(&join_floats(row));
                out.push('\n');
            }
            out.push_str(&format!("bias {i} {}\n", layer.outputs));
            out.push_str(&join_floats(&layer.bias));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = || lines.next().ok_or_else(|| "unexpected end of file".to_string());
        if next()?.trim() != "guidelab-smallnet 1" {
            return Err("missing 'guidelab-smallnet 1' header".into());
        }
        let sizes_line = next()?;
        let sizes: Vec<usize> = parse_tagged(sizes_line, "sizes")?;
        let act_line = next()?;
        let mut act = act_line.split_whitespace();
        if act.next() != Some("activation") {
            return Err(format!("expected activation line, got '{act_line}'"));
        }
        let activation = match (act.next(), act.next()) {
            (Some("relu"), None) => Activation::Relu,
            (Some("softplus"), Some(b)) => {
                Activation::Softplus { beta: b.parse().map_err(|e| format!("bad softplus beta '{b}': {e}"))? }
            }
            _ => return Err(format!("unknown activation line '{act_line}'")),
        };
        let mut net = Self::zeros(&sizes, activation).map_err(|e| e.to_string())?;
        for i in 0..net.layers.len() {
            let (outputs, inputs) = (net.layers[i].outputs, net.layers[i].inputs);
            let header: Vec<usize> = parse_tagged(next()?, "weights")?;
            if header != [i, outputs, inputs] {
                return Err(format!("layer {i}: expected weights header {i} {outputs} {inputs}"));
            }
            let mut weights = Vec::with_capacity(outputs * inputs);
            for _ in 0..outputs {
                let row = parse_floats(next()?)?;
                if row.len() != inputs {
                    return Err(format!("layer {i}: weight row has {} entries, expected {inputs}", row.len()));
                }
                weights.extend(row);
            }
            let header: Vec<usize> = parse_tagged(next()?, "bias")?;
            if header != [i, outputs] {
                return Err(format!("layer {i}: expected bias header {i} {outputs}"));
            }
            let bias = parse_floats(next()?)?;
            if bias.len() != outputs {
                return Err(format!("layer {i}: bias has {} entries, expected {outputs}", bias.len()));
            }
            net.layers[i].weights = weights;
            net.layers[i].bias = bias;
        }
        Ok(net)
    }
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

fn parse_floats(line: &str) -> std::result::Result<Vec<f64>, String> {
    line.split_whitespace().map(|t| t.parse::<f64>().map_err(|e| format!("bad number '{t}': {e}"))).collect()
}

fn parse_tagged(line: &str, tag: &str) -> std::result::Result<Vec<usize>, String> {
    let mut it = line.split_whitespace();
    if it.next() != Some(tag) {
        return Err(format!("expected '{tag}' line, got '{line}'"));
    }
    it.map(|t| t.parse::<usize>().map_err(|e| format!("bad integer '{t}': {e}"))).collect()
}

impl Classifier for SmallNet {
    fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    fn dim(&self) -> usize {
        self.layers[0].inputs
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i + 1 < self.layers.len() {
                for v in h.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
        }
        h
    }

    fn logits_vjp(&self, x: &[f64], weights: &dyn Fn(&[f64]) -> Vec<f64>) -> (Vec<f64>, Vec<f64>) {
        let pre = self.forward_trace(x);
        let logits = pre.last().expect("at least one layer").clone();
        let w = weights(&logits);
        let grad = self.backward_to_input(&pre, w);
        (logits, grad)
    }
}
