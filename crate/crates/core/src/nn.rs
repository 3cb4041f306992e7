//! Multilayer perceptron with softmax cross-entropy, written against flat
//! parameter vectors so the federated layer can treat a model as a point in
//! `R^d`.
//!
//! Parameter layout: for each layer in order, the `fan_in x fan_out` weight
//! matrix (row-major, so `x * W` maps a row of inputs to a row of outputs)
//! followed by the `fan_out` biases.

use std::ops::{Deref, DerefMut};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure_len, Error, Result};

/// Flat model parameters or model update.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// `self - other`, element-wise.
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len(), "length mismatch in sub");
        self.iter().zip(other.iter()).map(|(a, b)| a - b).collect()
    }

    pub fn norm_sq(&self) -> f64 {
        self.iter().map(|x| x * x).sum()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl FromIterator<f64> for ParamVector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|x| x.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation
    /// output `a`.
    fn backprop(self, grad: &mut Array2<f64>, a: &Array2<f64>) {
        match self {
            Activation::Relu => grad.zip_mut_with(a, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_mut_with(a, |g, &a| *g *= 1.0 - a * a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }

    fn end(&self) -> usize {
        self.bias_offset() + self.fan_out
    }

    fn weights<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.fan_in, self.fan_out),
            &params[self.offset..self.bias_offset()],
        )
        .expect("layer slice matches shape")
    }

    fn bias<'a>(&self, params: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&params[self.bias_offset()..self.end()])
    }
}

/// Layer sizes (input, hidden..., classes) and the hidden activation. The
/// output layer is always softmax.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least an input and an output layer, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        Ok(Self {
            layer_sizes,
            activation,
        })
    }

    /// 784-300-100-10 with ReLU hidden layers.
    pub fn lenet_300_100() -> Self {
        Self::new(vec![784, 300, 100, 10], Activation::Relu).expect("valid sizes")
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
        *self.layer_sizes.last().expect("at least two layers")
    }

    /// `d = sum over consecutive layers of (in * out + out)`.
    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset = layer.end();
                layer
            })
            .collect()
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        ensure_len("parameter vector", self.num_params(), params.len())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        ensure_len("batch feature width", self.input_dim(), batch.features.ncols())?;
        if let Some(&l) = batch.labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::Contract(format!(
                "label {l} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }
}

/// A mini-batch: one feature row per label.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Array2<f64>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        ensure_len("batch labels", features.nrows(), labels.len())?;
        Ok(Self { features, labels })
    }

    pub(crate) fn from_parts_unchecked(features: Array2<f64>, labels: Vec<usize>) -> Self {
        debug_assert_eq!(features.nrows(), labels.len());
        Self { features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// SGD with heavy-ball momentum. `momentum == 0` is plain SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: Vec<f64>,
}

impl OptimState {
    pub fn new(learning_rate: f64, momentum: f64, d: usize) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: vec![0.0; d],
        })
    }
}

/// Scaled-uniform (Glorot) weights in `+-sqrt(6 / (fan_in + fan_out))`, zero
/// biases, drawn from ChaCha8 seeded with `seed`.
pub fn init_model(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; spec.num_params()];
    for layer in spec.layers() {
        let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut params[layer.offset..layer.bias_offset()] {
            *w = rng.random_range(-bound..bound);
        }
    }
    ParamVector(params)
}

/// Hidden activations (after the nonlinearity) and the final logits.
struct ForwardPass {
    hidden: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

fn forward_pass(params: &[f64], spec: &MlpSpec, x: ArrayView2<'_, f64>) -> ForwardPass {
    let layers = spec.layers();
    let last = layers.len() - 1;
    let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(last);
    let mut logits = None;
    for (k, layer) in layers.iter().enumerate() {
        let mut z = match hidden.last() {
            Some(h) => h.dot(&layer.weights(params)),
            None => x.dot(&layer.weights(params)),
        };
        z += &layer.bias(params);
        if k == last {
            logits = Some(z);
        } else {
            spec.activation.apply(&mut z);
            hidden.push(z);
        }
    }
    ForwardPass {
        hidden,
        logits: logits.expect("at least one layer"),
    }
}

/// Replaces each row of logits by its softmax and returns the summed
/// cross-entropy against `labels`.
fn softmax_xent_in_place(logits: &mut Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (mut row, &y) in logits.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let target = row[y];
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        total += max + sum.ln() - target;
        row /= sum;
    }
    total
}

/// Mean cross-entropy of the softmax outputs over the batch.
pub fn forward_loss(params: &ParamVector, spec: &MlpSpec, batch: &Batch) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut logits = forward_pass(params, spec, batch.features.view()).logits;
    Ok(softmax_xent_in_place(&mut logits, &batch.labels) / batch.len() as f64)
}

/// Mean cross-entropy and its gradient with respect to every parameter.
pub fn backward(params: &ParamVector, spec: &MlpSpec, batch: &Batch) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let n = batch.len() as f64;
    let ForwardPass { hidden, logits } = forward_pass(params, spec, batch.features.view());
    let mut delta = logits;
    let loss = softmax_xent_in_place(&mut delta, &batch.labels) / n;
    for (mut row, &y) in delta.rows_mut().into_iter().zip(&batch.labels) {
        row[y] -= 1.0;
    }
    delta /= n;

    let mut grad = vec![0.0; params.len()];
    let layers = spec.layers();
    for (k, layer) in layers.iter().enumerate().rev() {
        let input = if k == 0 {
            batch.features.view()
        } else {
            hidden[k - 1].view()
        };
        let (w_grad, b_grad) = grad[layer.offset..layer.end()].split_at_mut(layer.fan_in * layer.fan_out);
        let mut w_grad = ArrayViewMut2::from_shape((layer.fan_in, layer.fan_out), w_grad)
            .expect("layer slice matches shape");
        general_mat_mul(1.0, &input.t(), &delta, 0.0, &mut w_grad);
        for (g, s) in b_grad.iter_mut().zip(delta.sum_axis(Axis(0))) {
            *g = s;
        }
        if k > 0 {
            let mut upstream = delta.dot(&layer.weights(params).t());
            spec.activation.backprop(&mut upstream, &hidden[k - 1]);
            delta = upstream;
        }
    }
    Ok((loss, ParamVector(grad)))
}

/// One SGD step. With momentum `mu > 0`: `v <- mu * v + grad`, then
/// `params - eta * v`; with `mu == 0` this is exactly `params - eta * grad`.
pub fn sgd_step(params: &mut ParamVector, grad: &ParamVector, optim: &mut OptimState) -> Result<()> {
    ensure_len("gradient", params.len(), grad.len())?;
    ensure_len("velocity", params.len(), optim.velocity.len())?;
    let eta = optim.learning_rate;
    if optim.momentum == 0.0 {
        for (w, g) in params.iter_mut().zip(grad.iter()) {
            *w -= eta * g;
        }
    } else {
        let mu = optim.momentum;
        for ((w, g), v) in params.iter_mut().zip(grad.iter()).zip(&mut optim.velocity) {
            *v = mu * *v + g;
            *w -= eta * *v;
        }
    }
    Ok(())
}

/// Draws mini-batches without replacement, reshuffling once the current
/// permutation is used up. The last batch of a pass may be short.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("cannot sample from an empty shard".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(Self {
            order: (0..len).collect(),
            cursor: len,
            batch_size,
        })
    }

    /// Steps needed for one pass over the data.
    pub fn steps_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn next_indices<R: RngCore + ?Sized>(&mut self, rng: &mut R) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor = (start + self.batch_size).min(self.order.len());
        &self.order[start..self.cursor]
    }
}

/// Output of [`local_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub params: ParamVector,
    /// `params - start`.
    pub update: ParamVector,
    /// Mean of the mini-batch losses seen during training.
    pub mean_loss: f64,
}

/// Runs exactly `steps` mini-batch SGD steps on `shard` starting from `start`.
pub fn local_train<R: RngCore + ?Sized>(
    start: &ParamVector,
    spec: &MlpSpec,
    shard: &Dataset,
    steps: usize,
    batch_size: usize,
    optim: &mut OptimState,
    rng: &mut R,
) -> Result<LocalResult> {
    if steps == 0 {
        return Err(Error::Config("local steps must be at least 1".into()));
    }
    let mut sampler = BatchSampler::new(shard.len(), batch_size)?;
    let mut params = start.clone();
    let mut loss_sum = 0.0;
    for _ in 0..steps {
        let batch = shard.batch(sampler.next_indices(rng));
        let (loss, grad) = backward(&params, spec, &batch)?;
        sgd_step(&mut params, &grad, optim)?;
        loss_sum += loss;
    }
    let update = params.sub(start);
    Ok(LocalResult {
        params,
        update,
        mean_loss: loss_sum / steps as f64,
    })
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 1000;

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(params: &ParamVector, spec: &MlpSpec, testset: &Dataset) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty test set".into()));
    }
    spec.check_params(params)?;
    ensure_len("test feature width", spec.input_dim(), testset.dim())?;
    let chunks = testset.len().div_ceil(EVAL_CHUNK);
    let correct: usize = crate::par::map_indexed(chunks, |c| {
        let lo = c * EVAL_CHUNK;
        let hi = (lo + EVAL_CHUNK).min(testset.len());
        let x = testset.features().slice(ndarray::s![lo..hi, ..]);
        let logits = forward_pass(params, spec, x).logits;
        logits
            .rows()
            .into_iter()
            .zip(&testset.labels()[lo..hi])
            .filter(|(row, &y)| argmax(row.view()) == y)
            .count()
    })
    .into_iter()
    .sum();
    Ok(correct as f64 / testset.len() as f64)
}

/// Class predictions (argmax, lowest index on ties).
pub fn predict(params: &ParamVector, spec: &MlpSpec, features: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    spec.check_params(params)?;
    ensure_len("feature width", spec.input_dim(), features.ncols())?;
    let logits = forward_pass(params, spec, features).logits;
    Ok(logits.rows().into_iter().map(argmax).collect())
}

/// Full-dataset gradient, accumulated chunk by chunk in a fixed order.
pub fn full_gradient(params: &ParamVector, spec: &MlpSpec, data: &Dataset) -> Result<(f64, ParamVector)> {
    if data.is_empty() {
        return Err(Error::Data("gradient of an empty dataset".into()));
    }
    let chunks = data.len().div_ceil(EVAL_CHUNK);
    let parts = crate::par::map_indexed(chunks, |c| {
        let lo = c * EVAL_CHUNK;
        let hi = (lo + EVAL_CHUNK).min(data.len());
        let idx: Vec<usize> = (lo..hi).collect();
        backward(params, spec, &data.batch(&idx)).map(|(l, g)| (l, g, hi - lo))
    });
    let total = data.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array1::<f64>::zeros(params.len());
    for part in parts {
        let (l, g, count) = part?;
        let weight = count as f64 / total;
        loss += weight * l;
        grad.scaled_add(weight, &Array1::from(g.into_inner()));
    }
    Ok((loss, ParamVector(grad.to_vec())))
}
