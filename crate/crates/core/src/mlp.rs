//! Minimal dense-network engine.
//!
//! Used twice in the lab: to train the digit recognizer whose weights get
//! mapped onto the crossbar arrays, and to train the output-voltage
//! corrector. Bias is handled as an appended constant-1 input component,
//! so each layer's weight matrix is `(fan_in + 1) x fan_out` with the bias
//! in the last row and maps 1:1 onto a crossbar array with a bias row.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dataset::DigitImage;
use crate::error::{Error, Result};

const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self {
            fan_in,
            fan_out,
            activation,
        }
    }
}

/// ReLU hidden layers plus an identity output layer.
pub fn dense_topology(input: usize, hidden: &[usize], output: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(hidden.len() + 1);
    let mut fan_in = input;
    for &h in hidden {
        specs.push(LayerSpec::new(fan_in, h, Activation::Relu));
        fan_in = h;
    }
    specs.push(LayerSpec::new(fan_in, output, Activation::Identity));
    specs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Dropout on hidden activations, train time only (inverted scaling).
    pub dropout_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1], got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// A labeled feature matrix (one row per sample).
#[derive(Debug, Clone)]
pub struct Samples {
    x: Array2<f64>,
    labels: Vec<u8>,
}

impl Samples {
    pub fn new(x: Array2<f64>, labels: Vec<u8>) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows vs {} labels",
                x.nrows(),
                labels.len()
            )));
        }
        Ok(Self { x, labels })
    }

    pub fn from_images(images: &[DigitImage]) -> Self {
        let n = images.len();
        let mut x = Array2::zeros((n, crate::dataset::IMAGE_PIXELS));
        let mut labels = Vec::with_capacity(n);
        for (i, img) in images.iter().enumerate() {
            for (j, v) in img.normalize().into_iter().enumerate() {
                x[(i, j)] = v;
            }
            labels.push(img.label());
        }
        Self { x, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    layers: Vec<LayerSpec>,
    /// Per layer `(fan_in + 1) x fan_out`; last row is the bias.
    weights: Vec<Array2<f64>>,
    seed: u64,
    train_meta: Option<TrainConfig>,
}

impl MlpModel {
    /// Seeded Glorot-uniform initialization; bias rows start at zero.
    pub fn init(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for spec in &layers {
            if spec.fan_in == 0 || spec.fan_out == 0 {
                return Err(Error::Config("layer fan-in/fan-out must be >= 1".into()));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(Error::Config(format!(
                    "layer chain mismatch: fan_out {} feeds fan_in {}",
                    pair[0].fan_out, pair[1].fan_in
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = layers
            .iter()
            .map(|spec| {
                let limit = (6.0 / (spec.fan_in + spec.fan_out) as f64).sqrt();
                let mut w = Array2::zeros((spec.fan_in + 1, spec.fan_out));
                for r in 0..spec.fan_in {
                    for c in 0..spec.fan_out {
                        w[(r, c)] = rng.random_range(-limit..limit);
                    }
                }
                w
            })
            .collect();
        Ok(Self {
            layers,
            weights,
            seed,
            train_meta: None,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Array2<f64> {
        &mut self.weights[layer]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn train_meta(&self) -> Option<&TrainConfig> {
        self.train_meta.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {len} components, model expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Per-layer activations in evaluation mode (no dropout).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x.len())?;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for (spec, w) in self.layers.iter().zip(&self.weights) {
            let mut z = vec![0.0; spec.fan_out];
            for (j, &aj) in a.iter().enumerate() {
                for (k, zk) in z.iter_mut().enumerate() {
                    *zk += aj * w[(j, k)];
                }
            }
            for (k, zk) in z.iter_mut().enumerate() {
                *zk += w[(spec.fan_in, k)];
            }
            if spec.activation == Activation::Relu {
                for zk in &mut z {
                    *zk = zk.max(0.0);
                }
            }
            acts.push(z.clone());
            a = z;
        }
        Ok(acts)
    }

    /// Per-layer activations in train mode: inverted dropout on hidden
    /// activations, propagated downstream. With `dropout_rate == 0` this
    /// equals [`forward`](Self::forward) exactly and consumes no randomness.
    pub fn forward_train(
        &self,
        x: &[f64],
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_input(x.len())?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        let keep = 1.0 - dropout_rate;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for (l, (spec, w)) in self.layers.iter().zip(&self.weights).enumerate() {
            let mut z = vec![0.0; spec.fan_out];
            for (j, &aj) in a.iter().enumerate() {
                for (k, zk) in z.iter_mut().enumerate() {
                    *zk += aj * w[(j, k)];
                }
            }
            for (k, zk) in z.iter_mut().enumerate() {
                *zk += w[(spec.fan_in, k)];
            }
            if spec.activation == Activation::Relu {
                for zk in &mut z {
                    *zk = zk.max(0.0);
                }
            }
            if dropout_rate > 0.0 && l < last {
                for zk in &mut z {
                    if rng.random::<f64>() < keep {
                        *zk /= keep;
                    } else {
                        *zk = 0.0;
                    }
                }
            }
            acts.push(z.clone());
            a = z;
        }
        Ok(acts)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(self.forward(x)?.last().unwrap()))
    }

    /// Batched logits (identity output assumed; softmax applied by callers
    /// that need probabilities).
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut a = x.to_owned();
        for (spec, w) in self.layers.iter().zip(&self.weights) {
            let z = append_bias(&a.view()).dot(w);
            a = match spec.activation {
                Activation::Relu => z.mapv(|v| v.max(0.0)),
                Activation::Identity => z,
            };
        }
        Ok(a)
    }

    /// Mean softmax-cross-entropy over a labeled batch (evaluation mode).
    pub fn batch_loss(&self, samples: &Samples) -> Result<f64> {
        let logits = self.forward_batch(samples.features())?;
        Ok(mean_cross_entropy(&logits, samples.labels()))
    }

    /// Loss plus analytic weight gradients (evaluation mode, no dropout).
    pub fn batch_gradients(&self, samples: &Samples) -> Result<(f64, Vec<Array2<f64>>)> {
        let (loss, grads, _) = backprop(&self.layers, &self.weights, samples, 0.0, None)?;
        Ok((loss, grads))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let weights: Vec<Vec<f64>> = self
            .weights
            .iter()
            .map(|w| w.iter().copied().collect())
            .collect();
        serde_json::json!({
            "schema_version": MODEL_SCHEMA_VERSION,
            "seed": self.seed,
            "layers": self.layers,
            "train_meta": self.train_meta,
            "weights": weights,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct ModelFile {
            schema_version: u32,
            seed: u64,
            layers: Vec<LayerSpec>,
            train_meta: Option<TrainConfig>,
            weights: Vec<Vec<f64>>,
        }
        let file: ModelFile = serde_json::from_value(value.clone())?;
        if file.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported model schema_version {}",
                file.schema_version
            )));
        }
        if file.weights.len() != file.layers.len() {
            return Err(Error::Dimension(format!(
                "{} weight blocks vs {} layers",
                file.weights.len(),
                file.layers.len()
            )));
        }
        let mut weights = Vec::with_capacity(file.layers.len());
        for (spec, flat) in file.layers.iter().zip(file.weights) {
            let shape = (spec.fan_in + 1, spec.fan_out);
            if flat.len() != shape.0 * shape.1 {
                return Err(Error::Dimension(format!(
                    "layer expects {}x{} weights, got {} values",
                    shape.0,
                    shape.1,
                    flat.len()
                )));
            }
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::OutOfRange("non-finite weight in model file".into()));
            }
            weights.push(Array2::from_shape_vec(shape, flat).expect("shape checked"));
        }
        Ok(Self {
            layers: file.layers,
            weights,
            seed: file.seed,
            train_meta: file.train_meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy accumulated from the train-mode forward passes.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub curve: Vec<EpochStats>,
    pub final_train_accuracy: f64,
    pub final_eval_accuracy: Option<f64>,
}

/// Mini-batch SGD with momentum on softmax-cross-entropy. Deterministic
/// for a given `(model, samples, config)`.
pub fn train(
    model: &MlpModel,
    train_set: &Samples,
    eval_set: Option<&Samples>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    model.check_input(train_set.features().ncols())?;
    let classes = model.output_dim();
    if let Some(&bad) = train_set.labels().iter().find(|&&l| l as usize >= classes) {
        return Err(Error::OutOfRange(format!(
            "label {bad} exceeds output dimension {classes}"
        )));
    }

    let mut weights = model.weights.clone();
    let mut velocity: Vec<Array2<f64>> = weights.iter().map(|w| Array2::zeros(w.dim())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let x = train_set.features().select(Axis(0), batch);
            let labels: Vec<u8> = batch.iter().map(|&i| train_set.labels()[i]).collect();
            let batch_samples = Samples::new(x, labels)?;
            let (loss, grads, batch_correct) = backprop(
                &model.layers,
                &weights,
                &batch_samples,
                cfg.dropout_rate,
                Some(&mut rng),
            )?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch starting at sample {}",
                    batch[0]
                )));
            }
            loss_sum += loss * batch.len() as f64;
            correct += batch_correct;
            for ((w, v), g) in weights.iter_mut().zip(&mut velocity).zip(&grads) {
                v.zip_mut_with(g, |vv, &gg| {
                    *vv = cfg.momentum * *vv - cfg.learning_rate * gg
                });
                w.zip_mut_with(v, |ww, &vv| *ww += vv);
            }
        }
        curve.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
        });
    }

    let trained = MlpModel {
        layers: model.layers.clone(),
        weights,
        seed: model.seed,
        train_meta: Some(cfg.clone()),
    };
    let final_train_accuracy = evaluate(&trained, train_set)?.accuracy;
    let final_eval_accuracy = match eval_set {
        Some(set) => Some(evaluate(&trained, set)?.accuracy),
        None => None,
    };
    Ok(TrainOutcome {
        model: trained,
        curve,
        final_train_accuracy,
        final_eval_accuracy,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true_label][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Argmax accuracy plus confusion matrix; ties break toward the lowest
/// index.
pub fn evaluate(model: &MlpModel, set: &Samples) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let classes = model.output_dim();
    let logits = model.forward_batch(set.features())?;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0usize;
    for (row, &label) in logits.outer_iter().zip(set.labels()) {
        let pred = argmax(row.as_slice().expect("contiguous row"));
        confusion[label as usize][pred] += 1;
        if pred == label as usize {
            correct += 1;
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / set.len() as f64,
        confusion,
    })
}

/// Index of the largest component; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn append_bias(x: &ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut x1 = Array2::ones((n, d + 1));
    x1.slice_mut(s![.., ..d]).assign(x);
    x1
}

fn mean_cross_entropy(logits: &Array2<f64>, labels: &[u8]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.outer_iter().zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - row[label as usize];
    }
    total / labels.len() as f64
}

/// Forward + backward over one batch. Returns (mean loss, weight grads,
/// correct predictions). Dropout masks are drawn from `rng` in layer order,
/// row-major; `rng` is untouched when `dropout_rate == 0`.
fn backprop(
    layers: &[LayerSpec],
    weights: &[Array2<f64>],
    batch: &Samples,
    dropout_rate: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Array2<f64>>, usize)> {
    let n = batch.len();
    let last = layers.len() - 1;
    let keep = 1.0 - dropout_rate;

    // Forward, caching biased inputs, pre-activations, and dropout masks.
    let mut inputs = Vec::with_capacity(layers.len());
    let mut preacts = Vec::with_capacity(layers.len());
    let mut masks: Vec<Option<Array2<f64>>> = Vec::with_capacity(layers.len());
    let mut a = batch.features().to_owned();
    for (l, (spec, w)) in layers.iter().zip(weights).enumerate() {
        let x1 = append_bias(&a.view());
        let z = x1.dot(w);
        inputs.push(x1);
        a = match spec.activation {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        };
        if dropout_rate > 0.0 && l < last {
            let rng = rng
                .as_deref_mut()
                .expect("dropout requires an rng");
            let mask = Array2::from_shape_fn(a.dim(), |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            a *= &mask;
            masks.push(Some(mask));
        } else {
            masks.push(None);
        }
        preacts.push(z);
    }

    // Softmax cross-entropy at the output.
    let logits = &a;
    let labels = batch.labels();
    let loss = mean_cross_entropy(logits, labels);
    let mut correct = 0usize;
    let mut delta = Array2::zeros(logits.dim());
    for (i, (row, &label)) in logits.outer_iter().zip(labels).enumerate() {
        let probs = softmax(row.as_slice().expect("contiguous row"));
        if argmax(row.as_slice().unwrap()) == label as usize {
            correct += 1;
        }
        for (k, &p) in probs.iter().enumerate() {
            delta[(i, k)] = (p - if k == label as usize { 1.0 } else { 0.0 }) / n as f64;
        }
    }

    // Backward.
    let mut grads: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); layers.len()];
    for l in (0..layers.len()).rev() {
        grads[l] = inputs[l].t().dot(&delta);
        if l > 0 {
            let spec = &layers[l];
            let w_core = weights[l].slice(s![..spec.fan_in, ..]);
            let mut da = delta.dot(&w_core.t());
            if let Some(mask) = &masks[l - 1] {
                da *= mask;
            }
            let relu_grad = preacts[l - 1].mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
            delta = da * relu_grad;
        }
    }
    Ok((loss, grads, correct))
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}
