//! Baseline device classifier trained in the base domain.
//!
//! The 1-D variant treats I and Q as two input channels over a length-L row:
//! five blocks of `conv(1×7) → ReLU → conv(1×5) → ReLU → maxpool(1×2)`, then
//! dense 256 → 256 → 128 with ReLU and a final dense layer with softmax. The
//! 2-D variant sees each slice as a one-channel 2×L image and uses five
//! `conv(2×5) → ReLU → maxpool(1×2)` blocks before the same dense head.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfprint_nn::loss::{softmax, softmax_cross_entropy};
use rfprint_nn::{Adam, Init, Layer, NetBuilder, Network, Padding, Sequential, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iqdata::SliceSet;

/// Pooling stages every variant applies; each halves the length.
pub const POOL_STAGES: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "2d")]
    TwoD,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::OneD => "1d",
            Variant::TwoD => "2d",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1d" | "oneD" => Ok(Variant::OneD),
            "2d" | "twoD" => Ok(Variant::TwoD),
            other => Err(Error::Precondition(format!(
                "unknown classifier variant {other}"
            ))),
        }
    }
}

/// Layer widths. [`ClassifierArch::new`] gives the full-size network;
/// desk-scale runs shrink `conv_filters` and `dense`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub variant: Variant,
    pub n_classes: usize,
    pub slice_length: usize,
    pub conv_filters: usize,
    pub dense: [usize; 3],
}

impl ClassifierArch {
    pub fn new(variant: Variant, n_classes: usize, slice_length: usize) -> Self {
        Self {
            variant,
            n_classes,
            slice_length,
            conv_filters: 128,
            dense: [256, 256, 128],
        }
    }

    /// Network input shape for `m` slices.
    pub fn input_shape(&self, m: usize) -> [usize; 4] {
        match self.variant {
            Variant::OneD => [m, 2, 1, self.slice_length],
            Variant::TwoD => [m, 1, 2, self.slice_length],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub arch: ClassifierArch,
    pub net: Network,
    pub training_log: Vec<EpochLog>,
    /// Epoch whose weights were kept (best validation accuracy).
    pub best_epoch: Option<usize>,
}

pub fn build_classifier(
    variant: Variant,
    n_classes: usize,
    slice_length: usize,
) -> Result<ClassifierModel> {
    build_classifier_with(&ClassifierArch::new(variant, n_classes, slice_length), 0)
}

pub fn build_classifier_with(arch: &ClassifierArch, seed: u64) -> Result<ClassifierModel> {
    if arch.n_classes < 2 {
        return Err(Error::Precondition(
            "a classifier needs at least two classes".into(),
        ));
    }
    let min_len = 1usize << POOL_STAGES;
    if arch.slice_length < min_len {
        return Err(Error::Shape(format!(
            "slice length {} does not survive {POOL_STAGES} 1x2 poolings (need ≥ {min_len})",
            arch.slice_length
        )));
    }
    if arch.conv_filters == 0 || arch.dense.contains(&0) {
        return Err(Error::Precondition("layer widths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = NetBuilder::new(&mut rng, Init::HeUniform);
    let f = arch.conv_filters;
    let mut layers = Vec::new();
    let pool = Layer::MaxPool2d { k_h: 1, k_w: 2 };
    match arch.variant {
        Variant::OneD => {
            let mut in_c = 2;
            for _ in 0..POOL_STAGES {
                layers.push(b.conv2d(in_c, f, (1, 7), (1, 1), Padding::same(1, 7)));
                layers.push(Layer::Relu);
                layers.push(b.conv2d(f, f, (1, 5), (1, 1), Padding::same(1, 5)));
                layers.push(Layer::Relu);
                layers.push(pool.clone());
                in_c = f;
            }
        }
        Variant::TwoD => {
            let mut in_c = 1;
            for _ in 0..POOL_STAGES {
                layers.push(b.conv2d(in_c, f, (2, 5), (1, 1), Padding::same(2, 5)));
                layers.push(Layer::Relu);
                layers.push(pool.clone());
                in_c = f;
            }
        }
    }
    let rows = match arch.variant {
        Variant::OneD => 1,
        Variant::TwoD => 2,
    };
    let mut width = f * rows * (arch.slice_length >> POOL_STAGES);
    for &d in &arch.dense {
        layers.push(b.linear(width, d));
        layers.push(Layer::Relu);
        width = d;
    }
    layers.push(b.linear(width, arch.n_classes));
    let net = b.finish(Sequential::new(layers));
    Ok(ClassifierModel {
        arch: arch.clone(),
        net,
        training_log: Vec::new(),
        best_epoch: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 128,
            epochs: 100,
            seed: 0,
            patience: None,
        }
    }
}

/// Per-slice softmax rows and argmax predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    pub n_classes: usize,
    /// Row-major `m × n_classes`.
    pub probabilities: Vec<f32>,
    pub predicted: Vec<usize>,
}

impl ClassifierOutput {
    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.probabilities[k * self.n_classes..(k + 1) * self.n_classes]
    }

    pub fn from_probabilities(n_classes: usize, probabilities: Vec<f32>) -> Self {
        let predicted = probabilities.chunks(n_classes).map(argmax).collect();
        Self {
            n_classes,
            probabilities,
            predicted,
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const INFER_BATCH: usize = 256;

impl ClassifierModel {
    fn input(&self, slices: &SliceSet, indices: &[usize]) -> Result<Tensor> {
        if slices.slice_length() != self.arch.slice_length {
            return Err(Error::Shape(format!(
                "model expects slices of length {}, got {}",
                self.arch.slice_length,
                slices.slice_length()
            )));
        }
        let t = slices.select(indices).to_tensor();
        Ok(t.reshape(self.arch.input_shape(indices.len()))?)
    }

    /// Mean cross-entropy of a batch and its parameter gradients.
    pub fn loss_and_grads(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let (logits, tape) = self.net.forward(x)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels);
        let mut grads = self.net.zero_grads();
        self.net.backward(tape, dlogits, &mut grads)?;
        Ok((loss, grads))
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.net.infer(x)?;
        Ok(softmax_cross_entropy(&logits, labels).0)
    }

    pub fn logits(&self, slices: &SliceSet) -> Result<Tensor> {
        let all: Vec<usize> = (0..slices.len()).collect();
        let mut parts = Vec::new();
        for chunk in all.chunks(INFER_BATCH) {
            parts.push(self.net.infer(&self.input(slices, chunk)?)?);
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros([0, self.arch.n_classes, 1, 1]));
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::concat(&refs)?)
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "baseline",
            "arch": self.arch,
            "training_log": self.training_log,
            "best_epoch": self.best_epoch,
            "config_hash": config_hash,
        });
        let file = std::fs::File::create(path)?;
        self.net.write_to(BufWriter::new(file), &meta)?;
        Ok(())
    }

    /// Loads a checkpoint and the config hash it was saved under.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let file = std::fs::File::open(path)?;
        let (net, meta) = Network::read_from(BufReader::new(file))?;
        let arch: ClassifierArch = serde_json::from_value(meta["arch"].clone())?;
        let training_log = serde_json::from_value(meta["training_log"].clone())?;
        let best_epoch = serde_json::from_value(meta["best_epoch"].clone())?;
        let hash = meta["config_hash"].as_str().unwrap_or_default().to_string();
        Ok((
            Self {
                arch,
                net,
                training_log,
                best_epoch,
            },
            hash,
        ))
    }

    pub fn write_log_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss", "val_acc"])?;
        for e in &self.training_log {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_accuracy.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_labels(set: &SliceSet, n_classes: usize, what: &str) -> Result<()> {
    if let Some(&bad) = set.labels().iter().find(|&&l| l >= n_classes) {
        return Err(Error::LabelMismatch(format!(
            "{what} label {bad} outside 0..{n_classes}"
        )));
    }
    let present = set.label_set();
    if let Some(missing) = (0..n_classes).find(|c| !present.contains(c)) {
        return Err(Error::Precondition(format!(
            "class {missing} has no slices in the {what} set"
        )));
    }
    Ok(())
}

/// Minimizes cross-entropy with Adam, keeping the weights of the epoch with
/// the best validation accuracy (earliest on ties).
pub fn train_classifier(
    mut model: ClassifierModel,
    train: &SliceSet,
    val: &SliceSet,
    cfg: &TrainConfig,
) -> Result<ClassifierModel> {
    let n = model.arch.n_classes;
    check_labels(train, n, "training")?;
    check_labels(val, n, "validation")?;
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Precondition(
            "batch size and epochs must be ≥ 1".into(),
        ));
    }
    let mut opt = Adam::new(&model.net.params, cfg.learning_rate, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = model.input(train, batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let (loss, grads) = model.loss_and_grads(&x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            opt.step(&mut model.net.params, &grads);
            if model
                .net
                .params
                .iter()
                .any(|t| t.data().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Divergence {
                    epoch,
                    loss: f64::INFINITY,
                });
            }
        }
        let out = classify(&model, val)?;
        let correct = out
            .predicted
            .iter()
            .zip(val.labels())
            .filter(|(p, l)| p == l)
            .count();
        let val_accuracy = correct as f64 / val.len() as f64;
        model.training_log.push(EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, model.net.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    if let Some((_, epoch, params)) = best {
        model.net.params = params;
        model.best_epoch = Some(epoch);
    }
    Ok(model)
}

/// Softmax probabilities and argmax labels for every slice.
pub fn classify(model: &ClassifierModel, slices: &SliceSet) -> Result<ClassifierOutput> {
    let logits = model.logits(slices)?;
    let probs = softmax(&logits);
    Ok(ClassifierOutput::from_probabilities(
        model.arch.n_classes,
        probs.into_vec(),
    ))
}
