//! Feed-forward softmax classifiers: evaluation, cross-entropy, and reverse-mode
//! differentiation with respect to parameters and inputs.
//!
//! Parameters live in one flat vector. Layer `l` with `fan_in` inputs and
//! `fan_out` outputs occupies `fan_out * fan_in` row-major weights followed by
//! `fan_out` biases, layers in order from input to output. The last layer has no
//! activation and feeds a softmax.

use std::ops::Deref;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ y = 1` for label distributions.
pub const LABEL_SUM_TOL: f64 = 1e-12;

/// Largest label-smoothing mass accepted by training configurations.
pub const MAX_LABEL_SMOOTHING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Layer shapes and hidden activation of a multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layer_sizes: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

/// Location of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl NetworkSpec {
    /// `layer_sizes` is `[d, hidden.., K]`; with no hidden sizes the model is
    /// plain softmax regression.
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = NetworkSpec {
            layer_sizes,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "need at least input and output sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        if self.num_classes() < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total parameter count `W = Σ (fan_in + 1) * fan_out`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += (w[0] + 1) * w[1];
                shape
            })
            .collect()
    }
}

/// Flat parameter vector of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, network needs {}",
                values.len(),
                spec.param_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is {}", values[i])));
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        ParamVector(vec![0.0; spec.param_count()])
    }

    /// Gaussian weights with std `sqrt(2 / fan_in)` and zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; spec.param_count()];
        for layer in spec.layers() {
            let normal = Normal::new(0.0, (2.0 / layer.fan_in as f64).sqrt())
                .expect("positive std");
            for v in &mut values[layer.weight_offset..layer.bias_offset] {
                *v = normal.sample(&mut rng);
            }
        }
        ParamVector(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Divide the output layer by `temperature`, i.e. the network now emits
    /// `softmax(logits / temperature)`.
    pub fn with_temperature(&self, spec: &NetworkSpec, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        let last = *spec.layers().last().expect("at least one layer");
        let end = last.bias_offset + last.fan_out;
        let mut values = self.0.clone();
        for v in &mut values[last.weight_offset..end] {
            *v /= temperature;
        }
        ParamVector::new(spec, values)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// One training example: input, label distribution and its argmax class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub class: usize,
}

impl LabeledSample {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if y.len() < 2 {
            return Err(Error::Shape(format!("label has {} classes", y.len())));
        }
        if y.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("label entries must be >= 0, got {y:?}")));
        }
        let sum: f64 = y.iter().sum();
        if (sum - 1.0).abs() > LABEL_SUM_TOL {
            return Err(Error::Config(format!("label sums to {sum}, not 1")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input feature".into()));
        }
        let class = argmax(&y);
        Ok(LabeledSample { x, y, class })
    }

    pub fn one_hot(x: Vec<f64>, class: usize, num_classes: usize) -> Result<Self> {
        Self::smoothed(x, class, num_classes, 0.0)
    }

    pub fn smoothed(x: Vec<f64>, class: usize, num_classes: usize, epsilon: f64) -> Result<Self> {
        let y = smooth_labels(class, num_classes, epsilon)?;
        Ok(LabeledSample { x, y, class })
    }

    pub fn num_classes(&self) -> usize {
        self.y.len()
    }
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &value) in v.iter().enumerate().skip(1) {
        if value > v[best] {
            best = i;
        }
    }
    best
}

/// `(1 - ε)·onehot(class) + ε / K`.
pub fn smooth_labels(class: usize, num_classes: usize, epsilon: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!(
            "label smoothing must lie in [0, 1), got {epsilon}"
        )));
    }
    if num_classes < 2 || class >= num_classes {
        return Err(Error::Config(format!(
            "class {class} out of range for {num_classes} classes"
        )));
    }
    let floor = epsilon / num_classes as f64;
    let mut y = vec![floor; num_classes];
    y[class] += 1.0 - epsilon;
    Ok(y)
}

/// Non-empty collection of samples sharing input and label dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyBatch)?;
        let (d, k) = (first.x.len(), first.y.len());
        if let Some(i) = samples
            .iter()
            .position(|s| s.x.len() != d || s.y.len() != k)
        {
            return Err(Error::Shape(format!(
                "sample {i} has shape ({}, {}), expected ({d}, {k})",
                samples[i].x.len(),
                samples[i].y.len()
            )));
        }
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples[0].x.len()
    }

    pub fn num_classes(&self) -> usize {
        self.samples[0].y.len()
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<LabeledSample> {
        self.samples
    }

    pub fn get(&self, index: usize) -> Option<&LabeledSample> {
        self.samples.get(index)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples.get(i).cloned().ok_or_else(|| {
                    Error::Shape(format!("index {i} out of range for {} samples", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }

    /// Replace every label by the ε-smoothed version of its argmax class.
    pub fn relabeled(&self, epsilon: f64) -> Result<Dataset> {
        let k = self.num_classes();
        let samples = self
            .samples
            .iter()
            .map(|s| LabeledSample::smoothed(s.x.clone(), s.class, k, epsilon))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }

    /// Mean entropy of the label distributions: the lowest reachable training loss.
    pub fn label_entropy(&self) -> f64 {
        self.samples.iter().map(|s| entropy(&s.y)).sum::<f64>() / self.len() as f64
    }

    fn check_spec(&self, spec: &NetworkSpec) -> Result<()> {
        if self.input_dim() != spec.input_dim() || self.num_classes() != spec.num_classes() {
            return Err(Error::Shape(format!(
                "dataset is ({}, {}), network is ({}, {})",
                self.input_dim(),
                self.num_classes(),
                spec.input_dim(),
                spec.num_classes()
            )));
        }
        Ok(())
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l]` the output of hidden layer `l`.
    pub activations: Vec<Vec<f64>>,
    /// Pre-activations of every layer; the last entry holds the logits.
    pub pre_activations: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.pre_activations.last().expect("at least one layer")
    }
}

fn check_params(spec: &NetworkSpec, params: &[f64]) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::Shape(format!(
            "parameter vector has {} entries, network needs {}",
            params.len(),
            spec.param_count()
        )));
    }
    Ok(())
}

/// Evaluate the network at `x`.
pub fn forward(spec: &NetworkSpec, params: &[f64], x: &[f64]) -> Result<ForwardCache> {
    check_params(spec, params)?;
    if x.len() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, network expects {}",
            x.len(),
            spec.input_dim()
        )));
    }
    Ok(forward_unchecked(spec, params, x))
}

fn forward_unchecked(spec: &NetworkSpec, params: &[f64], x: &[f64]) -> ForwardCache {
    let layers = spec.layers();
    let mut activations = Vec::with_capacity(layers.len());
    let mut pre_activations = Vec::with_capacity(layers.len());
    activations.push(x.to_vec());
    for (l, layer) in layers.iter().enumerate() {
        let input = activations.last().expect("pushed input");
        let weights = &params[layer.weight_offset..layer.bias_offset];
        let biases = &params[layer.bias_offset..layer.bias_offset + layer.fan_out];
        let z: Vec<f64> = weights
            .chunks_exact(layer.fan_in)
            .zip(biases)
            .map(|(row, &b)| b + dot(row, input))
            .collect();
        if l + 1 < layers.len() {
            activations.push(z.iter().map(|&v| spec.activation.apply(v)).collect());
        }
        pre_activations.push(z);
    }
    let log_probs = log_softmax(pre_activations.last().expect("one layer"));
    let probs = log_probs.iter().map(|v| v.exp()).collect();
    ForwardCache {
        activations,
        pre_activations,
        probs,
        log_probs,
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - log_norm).collect()
}

/// Cross entropy `-Σ yᵢ ln pᵢ`.
pub fn loss(probs: &[f64], y: &[f64]) -> f64 {
    cross_entropy_log(&probs.iter().map(|p| p.ln()).collect::<Vec<_>>(), y)
}

fn cross_entropy_log(log_probs: &[f64], y: &[f64]) -> f64 {
    -y.iter()
        .zip(log_probs)
        .filter(|(&t, _)| t != 0.0)
        .map(|(&t, &lp)| t * lp)
        .sum::<f64>()
}

/// Which label a loss is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// The (possibly smoothed) label distribution `y`.
    Soft,
    /// The argmax class `ỹ`.
    OneHot,
}

impl Target {
    fn distribution(self, sample: &LabeledSample) -> Vec<f64> {
        match self {
            Target::Soft => sample.y.clone(),
            Target::OneHot => {
                let mut t = vec![0.0; sample.y.len()];
                t[sample.class] = 1.0;
                t
            }
        }
    }
}

/// Backpropagate `seed = ∂loss/∂logits` and add `scale · ∂loss/∂params` into `grad`.
/// Returns `∂loss/∂x` when `want_input` is set.
pub(crate) fn backward_into(
    spec: &NetworkSpec,
    params: &[f64],
    cache: &ForwardCache,
    seed: &[f64],
    scale: f64,
    grad: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let layers = spec.layers();
    let mut delta: Vec<f64> = seed.iter().map(|v| v * scale).collect();
    for (l, layer) in layers.iter().enumerate().rev() {
        let input = &cache.activations[l];
        let g_w = &mut grad[layer.weight_offset..layer.bias_offset];
        for (row, &d) in g_w.chunks_exact_mut(layer.fan_in).zip(&delta) {
            if d != 0.0 {
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
        }
        for (g, &d) in grad[layer.bias_offset..layer.bias_offset + layer.fan_out]
            .iter_mut()
            .zip(&delta)
        {
            *g += d;
        }
        if l == 0 && !want_input {
            return None;
        }
        let weights = &params[layer.weight_offset..layer.bias_offset];
        let mut upstream = vec![0.0; layer.fan_in];
        for (row, &d) in weights.chunks_exact(layer.fan_in).zip(&delta) {
            if d != 0.0 {
                for (u, &w) in upstream.iter_mut().zip(row) {
                    *u += d * w;
                }
            }
        }
        if l == 0 {
            return Some(upstream);
        }
        let pre = &cache.pre_activations[l - 1];
        let post = &cache.activations[l];
        for ((u, &z), &a) in upstream.iter_mut().zip(pre).zip(post) {
            *u *= spec.activation.derivative(z, a);
        }
        delta = upstream;
    }
    None
}

/// Same as [`backward_into`] but only returns `∂/∂x`, skipping parameter gradients.
fn backward_input(spec: &NetworkSpec, params: &[f64], cache: &ForwardCache, seed: &[f64]) -> Vec<f64> {
    let layers = spec.layers();
    let mut delta = seed.to_vec();
    for (l, layer) in layers.iter().enumerate().rev() {
        let weights = &params[layer.weight_offset..layer.bias_offset];
        let mut upstream = vec![0.0; layer.fan_in];
        for (row, &d) in weights.chunks_exact(layer.fan_in).zip(&delta) {
            for (u, &w) in upstream.iter_mut().zip(row) {
                *u += d * w;
            }
        }
        if l == 0 {
            return upstream;
        }
        let pre = &cache.pre_activations[l - 1];
        let post = &cache.activations[l];
        for ((u, &z), &a) in upstream.iter_mut().zip(pre).zip(post) {
            *u *= spec.activation.derivative(z, a);
        }
        delta = upstream;
    }
    unreachable!("loop returns at the input layer")
}

fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("{what}[{i}] = {}", values[i]))),
        None => Ok(()),
    }
}

/// Loss of one sample and its gradient with respect to all parameters.
pub fn per_sample_loss_and_grad(
    spec: &NetworkSpec,
    params: &[f64],
    sample: &LabeledSample,
    target: Target,
) -> Result<(f64, Vec<f64>)> {
    let cache = forward(spec, params, &sample.x)?;
    if sample.y.len() != spec.num_classes() {
        return Err(Error::Shape("label length differs from network output".into()));
    }
    let t = target.distribution(sample);
    let seed: Vec<f64> = cache.probs.iter().zip(&t).map(|(p, y)| p - y).collect();
    let mut grad = vec![0.0; params.len()];
    backward_into(spec, params, &cache, &seed, 1.0, &mut grad, false);
    let loss = cross_entropy_log(&cache.log_probs, &t);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("per-sample loss is {loss}")));
    }
    ensure_finite("gradient", &grad)?;
    Ok((loss, grad))
}

pub fn per_sample_grad(
    spec: &NetworkSpec,
    params: &[f64],
    sample: &LabeledSample,
    target: Target,
) -> Result<Vec<f64>> {
    per_sample_loss_and_grad(spec, params, sample, target).map(|(_, g)| g)
}

/// Gradient of the single-class loss `-ln pᵢ(x)`, one row of `J_w[ℓ_x]`.
pub fn class_loss_grad(
    spec: &NetworkSpec,
    params: &[f64],
    cache: &ForwardCache,
    class: usize,
) -> Vec<f64> {
    let mut seed = cache.probs.clone();
    seed[class] -= 1.0;
    let mut grad = vec![0.0; params.len()];
    backward_into(spec, params, cache, &seed, 1.0, &mut grad, false);
    grad
}

/// Mean loss and mean gradient over `data[indices]`.
pub fn batch_loss_and_grad(
    spec: &NetworkSpec,
    params: &[f64],
    data: &Dataset,
    indices: &[usize],
    target: Target,
) -> Result<(f64, Vec<f64>)> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_params(spec, params)?;
    data.check_spec(spec)?;
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    for &i in indices {
        let sample = data
            .get(i)
            .ok_or_else(|| Error::Shape(format!("index {i} out of range")))?;
        let cache = forward_unchecked(spec, params, &sample.x);
        let t = target.distribution(sample);
        let seed: Vec<f64> = cache.probs.iter().zip(&t).map(|(p, y)| p - y).collect();
        backward_into(spec, params, &cache, &seed, 1.0, &mut grad, false);
        total += cross_entropy_log(&cache.log_probs, &t);
    }
    let n = indices.len() as f64;
    for g in &mut grad {
        *g /= n;
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("batch loss is {loss}")));
    }
    ensure_finite("batch gradient", &grad)?;
    Ok((loss, grad))
}

/// Soft-target and one-hot-target loss and gradient of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGrad {
    pub soft_loss: f64,
    pub hard_loss: f64,
    pub hard_grad: Vec<f64>,
    /// Soft minus one-hot gradient; `None` when every label is one-hot.
    pub soft_correction: Option<Vec<f64>>,
}

impl DualGrad {
    pub fn soft_grad(&self) -> Vec<f64> {
        match &self.soft_correction {
            Some(c) => self.hard_grad.iter().zip(c).map(|(h, c)| h + c).collect(),
            None => self.hard_grad.clone(),
        }
    }
}

/// Mean loss and gradient for both the soft and the one-hot target, sharing
/// one forward pass per sample.
pub fn batch_dual_loss_and_grad(
    spec: &NetworkSpec,
    params: &[f64],
    data: &Dataset,
    indices: &[usize],
) -> Result<DualGrad> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_params(spec, params)?;
    data.check_spec(spec)?;
    let mut hard = vec![0.0; params.len()];
    let mut correction: Option<Vec<f64>> = None;
    let (mut soft_total, mut hard_total) = (0.0, 0.0);
    for &i in indices {
        let sample = data
            .get(i)
            .ok_or_else(|| Error::Shape(format!("index {i} out of range")))?;
        let cache = forward_unchecked(spec, params, &sample.x);
        let mut seed = cache.probs.clone();
        seed[sample.class] -= 1.0;
        backward_into(spec, params, &cache, &seed, 1.0, &mut hard, false);
        hard_total -= cache.log_probs[sample.class];
        // Backprop is linear in the seed: p - y = (p - ỹ) + (ỹ - y).
        let one_hot = sample
            .y
            .iter()
            .enumerate()
            .all(|(j, &y)| y == if j == sample.class { 1.0 } else { 0.0 });
        if one_hot {
            soft_total -= cache.log_probs[sample.class];
        } else {
            let delta: Vec<f64> = sample
                .y
                .iter()
                .enumerate()
                .map(|(j, &y)| if j == sample.class { 1.0 - y } else { -y })
                .collect();
            let acc = correction.get_or_insert_with(|| vec![0.0; params.len()]);
            backward_into(spec, params, &cache, &delta, 1.0, acc, false);
            soft_total += cross_entropy_log(&cache.log_probs, &sample.y);
        }
    }
    let n = indices.len() as f64;
    for g in hard.iter_mut().chain(correction.iter_mut().flatten()) {
        *g /= n;
    }
    let (soft_loss, hard_loss) = (soft_total / n, hard_total / n);
    if !(soft_loss.is_finite() && hard_loss.is_finite()) {
        return Err(Error::Numeric(format!("batch loss is {soft_loss} / {hard_loss}")));
    }
    ensure_finite("batch gradient", &hard)?;
    if let Some(c) = &correction {
        ensure_finite("batch gradient", c)?;
    }
    Ok(DualGrad {
        soft_loss,
        hard_loss,
        hard_grad: hard,
        soft_correction: correction,
    })
}

/// Mean loss over `data[indices]` using forward passes only.
pub fn batch_loss(
    spec: &NetworkSpec,
    params: &[f64],
    data: &Dataset,
    indices: &[usize],
    target: Target,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_params(spec, params)?;
    data.check_spec(spec)?;
    let mut total = 0.0;
    for &i in indices {
        let sample = data
            .get(i)
            .ok_or_else(|| Error::Shape(format!("index {i} out of range")))?;
        let cache = forward_unchecked(spec, params, &sample.x);
        total += cross_entropy_log(&cache.log_probs, &target.distribution(sample));
    }
    let loss = total / indices.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("batch loss is {loss}")));
    }
    Ok(loss)
}

/// `∂ probs / ∂ x` as a `K × d` matrix.
pub fn input_jacobian(spec: &NetworkSpec, params: &[f64], x: &[f64]) -> Result<DMatrix<f64>> {
    let cache = forward(spec, params, x)?;
    let k = spec.num_classes();
    let p = &cache.probs;
    let mut jac = DMatrix::zeros(k, spec.input_dim());
    for i in 0..k {
        // ∂pᵢ/∂z_j = pᵢ (δᵢⱼ - pⱼ)
        let seed: Vec<f64> = (0..k)
            .map(|j| p[i] * (if i == j { 1.0 } else { 0.0 } - p[j]))
            .collect();
        let row = backward_input(spec, params, &cache, &seed);
        for (j, v) in row.into_iter().enumerate() {
            jac[(i, j)] = v;
        }
    }
    ensure_finite("input Jacobian", jac.as_slice())?;
    Ok(jac)
}

/// Mean loss and accuracy of a model on a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(spec: &NetworkSpec, params: &[f64], data: &Dataset) -> Result<Evaluation> {
    check_params(spec, params)?;
    data.check_spec(spec)?;
    let mut total = 0.0;
    let mut correct = 0usize;
    for sample in data.samples() {
        let cache = forward_unchecked(spec, params, &sample.x);
        total += cross_entropy_log(&cache.log_probs, &sample.y);
        if argmax(&cache.probs) == sample.class {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("evaluation loss is {loss}")));
    }
    Ok(Evaluation {
        loss,
        accuracy: correct as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn softmax_regression(d: usize, k: usize) -> NetworkSpec {
        NetworkSpec::new(vec![d, k], Activation::Tanh).unwrap()
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, w: &[f64], step: f64) -> Vec<f64> {
        let mut w = w.to_vec();
        (0..w.len())
            .map(|i| {
                let orig = w[i];
                w[i] = orig + step;
                let up = f(&w);
                w[i] = orig - step;
                let down = f(&w);
                w[i] = orig;
                (up - down) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn param_count_matches_layer_formula() {
        let spec = NetworkSpec::new(vec![3, 5, 4, 2], Activation::Relu).unwrap();
        assert_eq!(spec.param_count(), 4 * 5 + 6 * 4 + 5 * 2);
        let last = spec.layers()[2];
        assert_eq!(last.bias_offset + last.fan_out, spec.param_count());
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(NetworkSpec::new(vec![3], Activation::Tanh).is_err());
        assert!(NetworkSpec::new(vec![3, 1], Activation::Tanh).is_err());
        assert!(NetworkSpec::new(vec![3, 0, 2], Activation::Tanh).is_err());
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let spec = NetworkSpec::new(vec![4, 6, 3], Activation::Tanh).unwrap();
        let cache = forward(&spec, &ParamVector::zeros(&spec), &[1.0, -2.0, 0.5, 3.0]).unwrap();
        for p in &cache.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_logits_two_zero() {
        // W = [[1, 0], [0, 0]] on x = (2, 0) gives logits (2, 0).
        let spec = softmax_regression(2, 2);
        let params = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let cache = forward(&spec, &params, &[2.0, 0.0]).unwrap();
        let p0 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((cache.probs[0] - p0).abs() < 1e-15);
        assert!((cache.probs[0] - 0.8808).abs() < 1e-4);
        assert!((cache.probs[1] - 0.1192).abs() < 1e-4);
        let l = loss(&cache.probs, &[1.0, 0.0]);
        assert!((l - 0.1269).abs() < 1e-4);
        assert!((l - (-p0.ln())).abs() < 1e-14);
    }

    #[test]
    fn output_bias_shift_is_invisible() {
        let spec = NetworkSpec::new(vec![3, 4, 3], Activation::Tanh).unwrap();
        let params = ParamVector::init(&spec, 7);
        let x = [0.3, -0.1, 0.8];
        let base = forward(&spec, &params, &x).unwrap();
        let mut shifted = params.clone().into_vec();
        let last = spec.layers()[1];
        for b in &mut shifted[last.bias_offset..] {
            *b += 3.7;
        }
        let moved = forward(&spec, &shifted, &x).unwrap();
        for (a, b) in base.probs.iter().zip(&moved.probs) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let spec = softmax_regression(2, 2);
        assert!(matches!(forward(&spec, &[0.0; 6], &[1.0]), Err(Error::Shape(_))));
        assert!(matches!(forward(&spec, &[0.0; 5], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn label_smoothing_cases() {
        assert_eq!(smooth_labels(1, 3, 0.0).unwrap(), vec![0.0, 1.0, 0.0]);
        let y = smooth_labels(0, 2, 0.1).unwrap();
        assert!((y[0] - 0.95).abs() < 1e-15 && (y[1] - 0.05).abs() < 1e-15);
        for eps in [0.0, 0.2, 0.5, 0.9] {
            let y = smooth_labels(2, 4, eps).unwrap();
            assert_eq!(argmax(&y), 2);
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!(matches!(smooth_labels(0, 2, 1.0), Err(Error::Config(_))));
        assert!(matches!(smooth_labels(0, 2, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        let s = LabeledSample::new(vec![0.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(s.class, 0);
    }

    #[test]
    fn label_validation() {
        assert!(LabeledSample::new(vec![0.0], vec![0.5, 0.6]).is_err());
        assert!(LabeledSample::new(vec![0.0], vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn loss_special_points() {
        let uniform = [0.25; 4];
        assert!((loss(&uniform, &[0.0, 1.0, 0.0, 0.0]) - 4f64.ln()).abs() < 1e-15);
        let y = [0.7, 0.2, 0.1];
        assert!((loss(&y, &y) - entropy(&y)).abs() < 1e-15);
    }

    #[test]
    fn gradient_vanishes_when_prediction_matches_target() {
        // Zero params predict uniform; a uniform soft label makes p - y = 0.
        let spec = NetworkSpec::new(vec![2, 3, 2], Activation::Tanh).unwrap();
        let sample = LabeledSample::new(vec![0.4, -1.0], vec![0.5, 0.5]).unwrap();
        let g = per_sample_grad(&spec, &ParamVector::zeros(&spec), &sample, Target::Soft).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_regression_gradient_is_outer_product() {
        let spec = softmax_regression(3, 2);
        let params = [0.2, -0.4, 0.1, 0.3, 0.5, -0.2, 0.05, -0.1];
        let sample = LabeledSample::smoothed(vec![1.0, -0.5, 2.0], 1, 2, 0.1).unwrap();
        let p = forward(&spec, &params, &sample.x).unwrap().probs;
        let g = per_sample_grad(&spec, &params, &sample, Target::Soft).unwrap();
        for o in 0..2 {
            let r = p[o] - sample.y[o];
            for i in 0..3 {
                assert!((g[o * 3 + i] - r * sample.x[i]).abs() < 1e-15);
            }
            assert!((g[6 + o] - r).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = NetworkSpec::new(vec![3, 5, 4, 3], Activation::Tanh).unwrap();
        let params = ParamVector::init(&spec, 11);
        let sample = LabeledSample::smoothed(vec![0.3, -0.7, 1.1], 2, 3, 0.1).unwrap();
        for target in [Target::Soft, Target::OneHot] {
            let g = per_sample_grad(&spec, &params, &sample, target).unwrap();
            let t = target.distribution(&sample);
            let fd = central_diff(
                |w| loss(&forward(&spec, w, &sample.x).unwrap().probs, &t),
                &params,
                1e-5,
            );
            for (a, b) in g.iter().zip(&fd) {
                if b.abs() > 1e-8 {
                    assert!(((a - b) / b).abs() < 1e-6, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_per_sample() {
        let spec = NetworkSpec::new(vec![2, 4, 3], Activation::Relu).unwrap();
        let params = ParamVector::init(&spec, 3);
        let data = Dataset::new(
            (0..6)
                .map(|i| {
                    LabeledSample::smoothed(vec![i as f64 * 0.3 - 0.5, 1.0 - i as f64 * 0.2], i % 3, 3, 0.1)
                        .unwrap()
                })
                .collect(),
        )
        .unwrap();
        let idx: Vec<usize> = (0..6).collect();
        let (l, g) = batch_loss_and_grad(&spec, &params, &data, &idx, Target::Soft).unwrap();
        let mut mean = vec![0.0; g.len()];
        let mut mean_loss = 0.0;
        for s in data.samples() {
            let (ls, gs) = per_sample_loss_and_grad(&spec, &params, s, Target::Soft).unwrap();
            mean_loss += ls / 6.0;
            for (m, v) in mean.iter_mut().zip(gs) {
                *m += v / 6.0;
            }
        }
        assert!((l - mean_loss).abs() < 1e-12);
        for (a, b) in g.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }

        let single = batch_loss_and_grad(&spec, &params, &data, &[4], Target::Soft).unwrap();
        let direct = per_sample_loss_and_grad(&spec, &params, &data.samples()[4], Target::Soft).unwrap();
        assert_eq!(single, direct);

        let doubled: Vec<usize> = idx.iter().chain(&idx).copied().collect();
        let (l2, g2) = batch_loss_and_grad(&spec, &params, &data, &doubled, Target::Soft).unwrap();
        assert!((l2 - l).abs() < 1e-15);
        for (a, b) in g.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-15);
        }

        assert!(matches!(
            batch_loss_and_grad(&spec, &params, &data, &[], Target::Soft),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn dual_gradient_matches_single_target_passes() {
        let spec = NetworkSpec::new(vec![2, 4, 3], Activation::Tanh).unwrap();
        let params = ParamVector::init(&spec, 8);
        let data = Dataset::new(
            (0..5)
                .map(|i| {
                    let eps = if i % 2 == 0 { 0.2 } else { 0.0 };
                    LabeledSample::smoothed(vec![i as f64 * 0.4 - 1.0, 0.3], i % 3, 3, eps).unwrap()
                })
                .collect(),
        )
        .unwrap();
        let idx = [4, 0, 2, 1];
        let dual = batch_dual_loss_and_grad(&spec, &params, &data, &idx).unwrap();
        assert!(dual.soft_correction.is_some());
        let soft = (dual.soft_loss, dual.soft_grad());
        let hard = (dual.hard_loss, dual.hard_grad.clone());
        for (dual, target) in [(soft, Target::Soft), (hard, Target::OneHot)] {
            let (l, g) = batch_loss_and_grad(&spec, &params, &data, &idx, target).unwrap();
            assert!((dual.0 - l).abs() < 1e-14);
            for (a, b) in dual.1.iter().zip(&g) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn input_jacobian_closed_form_for_softmax_regression() {
        let spec = softmax_regression(2, 3);
        let params = [0.5, -1.0, 0.2, 0.3, -0.4, 0.8, 0.1, 0.0, -0.1];
        let x = [0.7, -0.2];
        let p = forward(&spec, &params, &x).unwrap().probs;
        let jac = input_jacobian(&spec, &params, &x).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let expected: f64 = (0..3)
                    .map(|m| p[i] * (if i == m { 1.0 } else { 0.0 } - p[m]) * params[m * 2 + j])
                    .sum();
                assert!((jac[(i, j)] - expected).abs() < 1e-15);
            }
        }
        let zero = input_jacobian(&spec, &[0.0; 9], &x).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let spec = NetworkSpec::new(vec![3, 6, 4], Activation::Tanh).unwrap();
        let params = ParamVector::init(&spec, 5);
        let x = [0.2, -0.3, 0.9];
        let jac = input_jacobian(&spec, &params, &x).unwrap();
        for i in 0..4 {
            let fd = central_diff(|xx| forward(&spec, &params, xx).unwrap().probs[i], &x, 1e-5);
            for j in 0..3 {
                let (a, b) = (jac[(i, j)], fd[j]);
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn temperature_scales_logits() {
        let spec = NetworkSpec::new(vec![2, 3, 2], Activation::Tanh).unwrap();
        let params = ParamVector::init(&spec, 1);
        let x = [0.5, 0.5];
        let hot = params.with_temperature(&spec, 2.0).unwrap();
        let a = forward(&spec, &params, &x).unwrap();
        let b = forward(&spec, &hot, &x).unwrap();
        for (za, zb) in a.logits().iter().zip(b.logits()) {
            assert!((za / 2.0 - zb).abs() < 1e-15);
        }
    }
}
