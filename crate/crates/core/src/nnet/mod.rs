//! Small from-scratch networks trained by mini-batch SGD on a per-sample
//! weighted cross-entropy.

mod container;
mod gradcheck;
mod layers;
mod sdae;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Image};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

pub use container::{read_container, write_container, ContainerHeader};
pub use gradcheck::{analytic_gradient, gradient_check, numeric_gradient, ToyBatch};
pub use layers::{Activation, Regularizer};
pub use sdae::{train_sdae, transform, SdaeEncoder, SdaeSpec};

use layers::{Conv, Dense, Layer, MaxPool};

/// Input geometry. Images are single-channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn image(height: usize, width: usize) -> Self {
        Self { channels: 1, height, width }
    }

    pub fn flat(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default)]
        regularizer: Regularizer,
    },
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        activation: Activation,
    },
    Maxpool {
        size: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    /// Dense softmax layer with one unit per class.
    Output,
}

fn one() -> usize {
    1
}

/// Learning rate `initial * decay^epoch`, never below `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default = "unit")]
    pub decay: f64,
    #[serde(default)]
    pub floor: f64,
}

fn unit() -> f64 {
    1.0
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        (self.initial * self.decay.powi(epoch as i32)).max(self.floor)
    }
}

/// Architecture and optimizer settings independent of the data they are
/// applied to. Fusion trees carry these as templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layers: Vec<LayerSpec>,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
}

impl ArchSpec {
    /// One hidden layer MLP.
    pub fn mlp(hidden: usize, lr: f64, batch_size: usize, epochs: usize) -> Self {
        Self {
            layers: vec![
                LayerSpec::Dense { units: hidden, activation: Activation::Relu, regularizer: Regularizer::None },
                LayerSpec::Output,
            ],
            lr: LrSchedule { initial: lr, decay: 1.0, floor: 0.0 },
            batch_size,
            epochs,
        }
    }

    /// Two conv/pool stages, two relu hidden layers with dropout, softmax.
    pub fn network3(lr: LrSchedule, epochs: usize) -> Self {
        Self {
            layers: vec![
                LayerSpec::Conv { filters: 20, kernel: 5, stride: 1, activation: Activation::None },
                LayerSpec::Maxpool { size: 2, stride: Some(2) },
                LayerSpec::Conv { filters: 40, kernel: 5, stride: 1, activation: Activation::Relu },
                LayerSpec::Maxpool { size: 2, stride: Some(2) },
                LayerSpec::Dense {
                    units: 500,
                    activation: Activation::Relu,
                    regularizer: Regularizer::Dropout { rate: 0.5 },
                },
                LayerSpec::Dense {
                    units: 1000,
                    activation: Activation::Relu,
                    regularizer: Regularizer::Dropout { rate: 0.5 },
                },
                LayerSpec::Output,
            ],
            lr,
            batch_size: 64,
            epochs,
        }
    }

    /// Like Network3 but wider convolutions and a DropConnect hidden layer.
    pub fn dropconnect(lr: LrSchedule, epochs: usize) -> Self {
        Self {
            layers: vec![
                LayerSpec::Conv { filters: 32, kernel: 5, stride: 1, activation: Activation::None },
                LayerSpec::Maxpool { size: 2, stride: Some(2) },
                LayerSpec::Conv { filters: 64, kernel: 5, stride: 1, activation: Activation::None },
                LayerSpec::Maxpool { size: 2, stride: Some(2) },
                LayerSpec::Dense {
                    units: 150,
                    activation: Activation::Relu,
                    regularizer: Regularizer::Dropconnect { rate: 0.5 },
                },
                LayerSpec::Output,
            ],
            lr,
            batch_size: 64,
            epochs,
        }
    }

    pub fn bind(&self, input: Shape, n_classes: usize, seed: u64) -> NetworkSpec {
        NetworkSpec { input, n_classes, seed, arch: self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub n_classes: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub arch: ArchSpec,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        Network::build(self).map(|_| ())
    }
}

/// Per-sample training weights, normalized to mean 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights(Vec<f64>);

impl SampleWeights {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    /// Validate (finite, nonnegative, not all zero) and rescale to mean 1.
    pub fn normalized(raw: &[f64]) -> Result<Self> {
        if let Some(i) = raw.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidSpec(format!("sample weight {i} is {}", raw[i])));
        }
        let total: f64 = raw.iter().sum();
        if total == 0.0 {
            return Err(Error::DegenerateWeights);
        }
        let n = raw.len() as f64;
        Ok(Self(raw.iter().map(|w| w * n / total).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A concrete network: layers with parameters.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input: Shape,
    n_outputs: usize,
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::RateOutOfRange(rate));
    }
    Ok(())
}

impl Network {
    /// Build with zero parameters, validating the layer chain.
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        let invalid = |m: String| Err(Error::InvalidSpec(m));
        if spec.input.flat() == 0 {
            return invalid("input has a zero dimension".into());
        }
        if spec.n_classes < 2 {
            return Err(Error::TooFewClasses(spec.n_classes));
        }
        if spec.arch.batch_size == 0 {
            return invalid("batch_size must be positive".into());
        }
        match spec.arch.layers.last() {
            Some(LayerSpec::Output) => {}
            _ => return invalid("final layer must be the softmax output".into()),
        }
        let mut layers = Vec::new();
        // (h, w, c) while spatial; None after the first dense layer
        let mut spatial = Some((spec.input.height, spec.input.width, spec.input.channels));
        let mut flat = spec.input.flat();
        for (i, ls) in spec.arch.layers.iter().enumerate() {
            match *ls {
                LayerSpec::Dense { units, activation, regularizer } => {
                    check_rate(regularizer.rate())?;
                    if units == 0 {
                        return invalid(format!("layer {i}: zero units"));
                    }
                    layers.push(Layer::Dense(Dense {
                        w: Array2::zeros((units, flat)),
                        b: Array1::zeros(units),
                        activation,
                        regularizer,
                        softmax: false,
                    }));
                    flat = units;
                    spatial = None;
                }
                LayerSpec::Output => {
                    if i + 1 != spec.arch.layers.len() {
                        return invalid(format!("layer {i}: output layer must be last"));
                    }
                    layers.push(Layer::Dense(Dense {
                        w: Array2::zeros((spec.n_classes, flat)),
                        b: Array1::zeros(spec.n_classes),
                        activation: Activation::None,
                        regularizer: Regularizer::None,
                        softmax: true,
                    }));
                    flat = spec.n_classes;
                }
                LayerSpec::Conv { filters, kernel, stride, activation } => {
                    let Some((h, w, c)) = spatial else {
                        return invalid(format!("layer {i}: conv after a dense layer"));
                    };
                    if stride == 0 || kernel == 0 || filters == 0 || kernel > h || kernel > w {
                        return invalid(format!("layer {i}: conv {kernel}x{kernel}/{stride} on {h}x{w}"));
                    }
                    let conv = Conv {
                        w: Array2::zeros((filters, kernel * kernel * c)),
                        b: Array1::zeros(filters),
                        activation,
                        in_shape: (h, w, c),
                        kernel: (kernel, kernel),
                        stride,
                    };
                    let (oh, ow) = conv.out_hw();
                    spatial = Some((oh, ow, filters));
                    flat = oh * ow * filters;
                    layers.push(Layer::Conv(conv));
                }
                LayerSpec::Maxpool { size, stride } => {
                    let Some((h, w, c)) = spatial else {
                        return invalid(format!("layer {i}: maxpool after a dense layer"));
                    };
                    let stride = stride.unwrap_or(size);
                    if size == 0 || stride == 0 || size > h || size > w {
                        return invalid(format!("layer {i}: maxpool {size}/{stride} on {h}x{w}"));
                    }
                    let pool = MaxPool { in_shape: (h, w, c), size, stride };
                    let (oh, ow) = pool.out_hw();
                    spatial = Some((oh, ow, c));
                    flat = oh * ow * c;
                    layers.push(Layer::MaxPool(pool));
                }
            }
        }
        Ok(Self { layers, input: spec.input, n_outputs: spec.n_classes })
    }

    /// Build and draw weights uniformly in `±sqrt(6 / (fan_in + fan_out))`.
    /// Biases start at zero.
    pub fn init(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        use rand::Rng as _;
        let mut net = Self::build(spec)?;
        for layer in &mut net.layers {
            let (fan_in, fan_out, w) = match layer {
                Layer::Dense(d) => (d.w.ncols(), d.w.nrows(), &mut d.w),
                Layer::Conv(c) => (c.w.ncols(), c.w.nrows() * c.kernel.0 * c.kernel.1, &mut c.w),
                Layer::MaxPool(_) => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-limit..=limit));
        }
        Ok(net)
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// All parameters flattened: per layer, weights then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.layers.iter().filter_map(Layer::params) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::LengthMismatch { expected: self.param_count(), found: values.len() });
        }
        let mut rest = values;
        for (w, b) in self.layers.iter_mut().filter_map(Layer::params_mut) {
            let (head, tail) = rest.split_at(w.len());
            w.copy_from_slice(head);
            let (head, tail) = tail.split_at(b.len());
            b.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub(crate) fn has_regularizers(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Dense(d) if d.regularizer != Regularizer::None))
    }

    pub(crate) fn forward_train(&self, x: Array2<f64>, rng: &mut Rng) -> (Array2<f64>, Vec<layers::Cache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut a = x;
        for layer in &self.layers {
            let (out, cache) = layer.forward(a, Some(&mut *rng));
            caches.push(cache);
            a = out;
        }
        (a, caches)
    }

    /// Inference pass (regularizers in their deterministic scaled form).
    pub fn forward(&self, x: Array2<f64>) -> Array2<f64> {
        self.layers.iter().fold(x, |a, layer| layer.forward(a, None).0)
    }

    /// Backpropagate `grad_out` (the gradient with respect to the output
    /// logits) and return parameter gradients in [`Network::params`] order.
    pub(crate) fn backward(&self, grad_out: Array2<f64>, caches: Vec<layers::Cache>) -> Vec<layers::Grads> {
        let mut grads = Vec::new();
        let mut g = grad_out;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (dx, pg) = layer.backward(g, cache);
            if let Some(pg) = pg {
                grads.push(pg);
            }
            g = dx;
        }
        grads.reverse();
        grads
    }

    pub(crate) fn sgd_step(&mut self, grads: &[layers::Grads], lr: f64) {
        let params = self.layers.iter_mut().filter_map(|l| match l {
            Layer::Dense(d) => Some((&mut d.w, &mut d.b)),
            Layer::Conv(c) => Some((&mut c.w, &mut c.b)),
            Layer::MaxPool(_) => None,
        });
        for ((w, b), g) in params.zip(grads) {
            w.scaled_add(-lr, &g.w);
            b.scaled_add(-lr, &g.b);
        }
    }
}

/// Stack images into a `[batch x pixels]` matrix.
pub(crate) fn batch_matrix(images: &[Image], indices: &[usize]) -> Array2<f64> {
    let d = images.first().map_or(0, Image::len);
    let mut m = Array2::zeros((indices.len(), d));
    for (mut row, &i) in m.rows_mut().into_iter().zip(indices) {
        for (dst, &src) in row.iter_mut().zip(images[i].pixels()) {
            *dst = f64::from(src);
        }
    }
    m
}

/// Weighted mean cross-entropy over a batch and its gradient with respect to
/// the logits: `(1/B) sum_n w_n CE_n`.
pub(crate) fn weighted_ce(probs: &Array2<f64>, labels: &[usize], weights: &[f64]) -> (f64, Array2<f64>) {
    let batch = probs.nrows() as f64;
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (n, mut row) in grad.rows_mut().into_iter().enumerate() {
        let y = labels[n];
        loss += weights[n] * -probs[[n, y]].max(1e-300).ln();
        row[y] -= 1.0;
        let scale = weights[n] / batch;
        row.mapv_inplace(|v| v * scale);
    }
    (loss / batch, grad)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub validation_accuracy: Option<f64>,
    pub train_loss: Vec<f64>,
}

/// An immutable trained classifier.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub spec: NetworkSpec,
    pub network: Network,
    pub metrics: TrainMetrics,
}

/// Anything that maps images to per-class probabilities.
pub trait Learner: Send + Sync {
    fn n_classes(&self) -> usize;
    fn predict_proba(&self, images: &[Image]) -> Result<Vec<Vec<f64>>>;
}

impl Learner for TrainedModel {
    fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    fn predict_proba(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        predict(self, images)
    }
}

fn check_images(shape: Shape, images: &[Image]) -> Result<()> {
    if shape.channels != 1 {
        return Err(Error::DimensionMismatch(format!("{} input channels; images have 1", shape.channels)));
    }
    if let Some((i, im)) =
        images.iter().enumerate().find(|(_, im)| im.height() != shape.height || im.width() != shape.width)
    {
        return Err(Error::DimensionMismatch(format!(
            "image {i} is {}x{}, network expects {}x{}",
            im.height(),
            im.width(),
            shape.height,
            shape.width
        )));
    }
    Ok(())
}

const PREDICT_CHUNK: usize = 500;

/// Per-sample class probabilities, in input order.
pub fn predict(model: &TrainedModel, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    check_images(model.spec.input, images)?;
    let idx: Vec<usize> = (0..images.len()).collect();
    let mut out = Vec::with_capacity(images.len());
    for chunk in idx.chunks(PREDICT_CHUNK) {
        let probs = model.network.forward(batch_matrix(images, chunk));
        out.extend(probs.rows().into_iter().map(|r| r.to_vec()));
    }
    Ok(out)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn accuracy(network: &Network, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(PREDICT_CHUNK) {
        let probs = network.forward(batch_matrix(data.images(), chunk));
        correct += probs
            .rows()
            .into_iter()
            .zip(chunk)
            .filter(|(row, &i)| argmax(row.as_slice().expect("row")) == data.labels()[i])
            .count();
    }
    correct as f64 / data.len() as f64
}

/// Train by mini-batch SGD and keep the epoch with the best validation
/// accuracy (the last epoch if `validation` is empty).
pub fn train(
    spec: &NetworkSpec,
    data: &Dataset,
    weights: Option<&SampleWeights>,
    validation: &Dataset,
) -> Result<TrainedModel> {
    check_images(spec.input, data.images())?;
    check_images(spec.input, validation.images())?;
    if data.n_classes() != spec.n_classes {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} classes, network {}",
            data.n_classes(),
            spec.n_classes
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let weights = match weights {
        Some(w) if w.len() != data.len() => {
            return Err(Error::DimensionMismatch(format!("{} weights for {} samples", w.len(), data.len())))
        }
        // renormalize: callers may hand in raw-but-valid weights
        Some(w) => SampleWeights::normalized(w.as_slice())?,
        None => SampleWeights::uniform(data.len()),
    };
    let mut rng = seed::rng(spec.seed);
    let mut net = Network::init(spec, &mut rng)?;
    let mut best: Option<(f64, usize, Network)> = None;
    let mut train_loss = Vec::with_capacity(spec.arch.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let w = weights.as_slice();
    for epoch in 0..spec.arch.epochs {
        let lr = spec.arch.lr.at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(spec.arch.batch_size) {
            let x = batch_matrix(data.images(), batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let bw: Vec<f64> = batch.iter().map(|&i| w[i]).collect();
            let (probs, caches) = net.forward_train(x, &mut rng);
            let (loss, grad) = weighted_ce(&probs, &labels, &bw);
            epoch_loss += loss * batch.len() as f64;
            let grads = net.backward(grad, caches);
            net.sgd_step(&grads, lr);
        }
        train_loss.push(epoch_loss / data.len() as f64);
        if !validation.is_empty() {
            let acc = accuracy(&net, validation);
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, net.clone()));
            }
        }
    }
    let (network, metrics) = match best {
        Some((acc, epoch, net)) => {
            (net, TrainMetrics { best_epoch: epoch, validation_accuracy: Some(acc), train_loss })
        }
        None => (
            net,
            TrainMetrics { best_epoch: spec.arch.epochs.saturating_sub(1), validation_accuracy: None, train_loss },
        ),
    };
    Ok(TrainedModel { spec: spec.clone(), network, metrics })
}

/// Keep-mask for `count` weights with drop probability `rate`
/// (`true` = kept).
pub fn dropconnect_mask(count: usize, rate: f64, seed: u64) -> Result<Vec<bool>> {
    check_rate(rate)?;
    Ok(layers::bernoulli_keep(count, rate, &mut seed::rng(seed)))
}
