//! Training loop with early stopping, evaluation and cross-domain matrices.

use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::backbone::{Model, ModelConfig, ModelError, PlainLinear};
use crate::data::{mix_seed, DataError, Loader, Split};
use crate::lora::{LoraError, PeftModel};
use crate::metrics::{Averaging, MetricsError, MetricsReport};
use crate::optim::{AdamW, AdamWConfig, OptimError, ParamStore};
use crate::tensor::{NdArray, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },
    #[error("split `{0}` has no samples")]
    EmptySplit(Split),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("class vocabulary mismatch between model `{model}` and dataset `{dataset}`: {detail}")]
    VocabMismatch {
        model: String,
        dataset: String,
        detail: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    /// True for failures caused by NaN or infinite values.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::Divergence { .. }
                | TrainError::Tensor(TensorError::NonFinite(_))
                | TrainError::Model(ModelError::Tensor(TensorError::NonFinite(_)))
                | TrainError::Lora(LoraError::Tensor(TensorError::NonFinite(_)))
                | TrainError::Lora(LoraError::Model(ModelError::Tensor(TensorError::NonFinite(_))))
                | TrainError::Optim(OptimError::NonFiniteGrad(_))
        )
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn default_lr() -> f64 {
    1e-4
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    0.05
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}
fn default_patience() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Applied to trainable tensors with two or more dimensions.
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: default_wd(),
            max_epochs: default_epochs(),
            batch_size: default_batch(),
            patience: default_patience(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adamw()
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::InvalidConfig(
                "patience, batch_size and max_epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// seconds since training started
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }

    /// `epoch,train_loss,val_loss,val_acc` with a header row. Wall time is
    /// left out so identical runs give identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for e in &self.epochs {
            out += &format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.val_accuracy);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation accuracy; only strict improvements count, so
/// ties keep the earliest epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if accuracy <= b => {
                self.since += 1;
                if self.since >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, accuracy));
                self.since = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

/// Anything that maps a `[N, C, H, W]` batch to `[N, K]` logits.
pub trait Classifier {
    fn logits(&self, x: &NdArray<f32>) -> Result<NdArray<f32>>;
}

/// A classifier whose trainable tensors can be recorded on a graph and updated.
pub trait Trainable: Classifier + ParamStore<f32> {
    fn model_config(&self) -> &ModelConfig;

    /// Records the forward pass; returns the logits and every trainable tensor.
    fn record(
        &self,
        g: &mut Graph<f32>,
        x: Var,
        train_mode: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<(String, Var)>)>;

    fn trainable_names(&self) -> Vec<String>;

    fn tensor(&self, name: &str) -> Option<&NdArray<f32>>;

    fn snapshot(&self) -> Vec<(String, NdArray<f32>)> {
        self.trainable_names()
            .into_iter()
            .filter_map(|n| self.tensor(&n).cloned().map(|t| (n, t)))
            .collect()
    }

    fn restore(&mut self, snapshot: &[(String, NdArray<f32>)]) {
        for (name, t) in snapshot {
            if let Some(dst) = self.tensor_mut(name) {
                *dst = t.clone();
            }
        }
    }
}

impl Classifier for Model<f32> {
    fn logits(&self, x: &NdArray<f32>) -> Result<NdArray<f32>> {
        Ok(self.forward(x, false)?)
    }
}

impl ParamStore<f32> for Model<f32> {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut NdArray<f32>> {
        self.param_mut(name).ok()
    }
}

impl Trainable for Model<f32> {
    fn model_config(&self) -> &ModelConfig {
        self.config()
    }

    fn record(
        &self,
        g: &mut Graph<f32>,
        x: Var,
        _train_mode: bool,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        let binding = self.bind(g, |_, p| p.trainable);
        let vars = binding
            .iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(n, v)| (n.to_string(), v))
            .collect();
        let logits = self.forward_graph(g, &binding, x, &mut PlainLinear)?;
        Ok((logits, vars))
    }

    fn trainable_names(&self) -> Vec<String> {
        self.params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    fn tensor(&self, name: &str) -> Option<&NdArray<f32>> {
        self.param(name).ok()
    }
}

impl Classifier for PeftModel<f32> {
    fn logits(&self, x: &NdArray<f32>) -> Result<NdArray<f32>> {
        Ok(self.predict(x)?)
    }
}

impl ParamStore<f32> for PeftModel<f32> {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut NdArray<f32>> {
        PeftModel::tensor_mut(self, name)
    }
}

impl Trainable for PeftModel<f32> {
    fn model_config(&self) -> &ModelConfig {
        PeftModel::model_config(self)
    }

    fn record(
        &self,
        g: &mut Graph<f32>,
        x: Var,
        train_mode: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        Ok(self.forward_graph(g, x, train_mode, rng)?)
    }

    fn trainable_names(&self) -> Vec<String> {
        PeftModel::trainable_names(self)
    }

    fn tensor(&self, name: &str) -> Option<&NdArray<f32>> {
        PeftModel::tensor(self, name)
    }
}

/// One optimizer step on a batch; returns the mean cross-entropy.
pub fn train_step<M: Trainable + ?Sized>(
    model: &mut M,
    optimizer: &mut AdamW,
    images: NdArray<f32>,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(images);
    let (logits, vars) = model.record(&mut g, x, true, rng)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    let value = f64::from(g.value(loss).data()[0]);
    let mut grads = g.backward(loss)?;
    let grads: Vec<(String, NdArray<f32>)> = vars
        .into_iter()
        .filter_map(|(name, v)| grads.take(v).map(|gr| (name, gr)))
        .collect();
    optimizer.apply(model, &grads)?;
    Ok(value)
}

/// Validation loss and accuracy on `split`.
pub fn validate<C: Classifier + ?Sized>(
    model: &C,
    loader: &mut Loader,
    split: Split,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let preds = predict(model, loader, split, batch_size)?;
    Ok((preds.mean_loss(), preds.accuracy()))
}

/// Trains until `max_epochs` or until `patience` epochs pass without a new
/// best validation accuracy, then restores the best epoch's weights.
pub fn train<M: Trainable>(model: &mut M, loader: &mut Loader, cfg: &TrainConfig) -> Result<TrainHistory> {
    let batch = cfg.batch_size;
    train_with(model, loader, cfg, |m, l, _| validate(m, l, Split::Val, batch))
}

/// [`train`] with a caller-supplied validation step returning
/// `(val_loss, val_accuracy)` for the current weights.
pub fn train_with<M, V>(model: &mut M, loader: &mut Loader, cfg: &TrainConfig, mut validator: V) -> Result<TrainHistory>
where
    M: Trainable,
    V: FnMut(&M, &mut Loader, usize) -> Result<(f64, f64)>,
{
    cfg.validate()?;
    let train_idx = loader.manifest().indices(Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    let mut optimizer = AdamW::new(cfg.adamw())?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainHistory::default();
    let mut best = model.snapshot();
    let start = Instant::now();
    for epoch in 1..=cfg.max_epochs {
        let e = epoch as u64;
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, e, 0x5348])));
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = loader.load_batch(Split::Train, chunk, true, cfg.seed, e)?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, e, step as u64, 0x4452]));
            let loss = train_step(model, &mut optimizer, images, &labels, &mut rng).map_err(|err| {
                if err.is_numeric() {
                    TrainError::Divergence {
                        epoch,
                        step,
                        detail: err.to_string(),
                    }
                } else {
                    err
                }
            })?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    step,
                    detail: format!("loss {loss}"),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let (val_loss, val_accuracy) = validator(model, loader, epoch)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_accuracy,
            wall_time: start.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: train_loss {:.4} val_loss {val_loss:.4} val_acc {val_accuracy:.4}",
            loss_sum / seen as f64
        );
        match stopper.observe(epoch, val_accuracy) {
            StopDecision::Improved => best = model.snapshot(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    history.best_epoch = stopper.best_epoch().unwrap_or(0);
    model.restore(&best);
    Ok(history)
}

/// Eval-mode outputs for every sample of a split.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub indices: Vec<usize>,
    pub paths: Vec<String>,
    pub labels: Vec<usize>,
    pub preds: Vec<usize>,
    /// softmax rows
    pub probs: Vec<Vec<f64>>,
    /// per-sample cross-entropy
    pub losses: Vec<f64>,
    pub num_classes: usize,
}

impl Predictions {
    pub fn accuracy(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        let hits = self.preds.iter().zip(&self.labels).filter(|(p, l)| p == l).count();
        hits as f64 / self.labels.len() as f64
    }

    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }

    pub fn report(&self, averaging: Averaging) -> Result<MetricsReport> {
        Ok(MetricsReport::compute(&self.preds, &self.labels, self.num_classes, averaging)?)
    }

    /// `path, true, predicted` and one score column per class.
    pub fn to_tsv(&self, class_names: &[String]) -> String {
        let mut out = String::from("path\ttrue\tpredicted");
        for c in class_names {
            out += &format!("\tscore_{c}");
        }
        out.push('\n');
        for i in 0..self.labels.len() {
            out += &format!(
                "{}\t{}\t{}",
                self.paths[i], class_names[self.labels[i]], class_names[self.preds[i]]
            );
            for p in &self.probs[i] {
                out += &format!("\t{p:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Softmax probabilities and per-row cross-entropy, computed in f64.
fn score_rows(logits: &NdArray<f32>, labels: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = logits.last_dim();
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
            let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let loss = z.ln() - (f64::from(row[y]) - max);
            (exps.iter().map(|e| e / z).collect(), loss)
        })
        .unzip()
}

pub fn predict<C: Classifier + ?Sized>(
    model: &C,
    loader: &mut Loader,
    split: Split,
    batch_size: usize,
) -> Result<Predictions> {
    let indices = loader.manifest().indices(split);
    if indices.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let mut out = Predictions {
        indices: indices.clone(),
        paths: Vec::new(),
        labels: Vec::new(),
        preds: Vec::new(),
        probs: Vec::new(),
        losses: Vec::new(),
        num_classes: 0,
    };
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, labels) = loader.load_batch(split, chunk, false, 0, 0)?;
        let logits = model.logits(&images)?;
        out.num_classes = logits.last_dim();
        if let Some(&bad) = labels.iter().find(|&&y| y >= out.num_classes) {
            return Err(TrainError::Model(ModelError::ClassOutOfRange {
                class: bad,
                num_classes: out.num_classes,
            }));
        }
        out.preds.extend(logits.argmax_rows());
        let (probs, losses) = score_rows(&logits, &labels);
        out.probs.extend(probs);
        out.losses.extend(losses);
        out.labels.extend(labels);
    }
    out.paths = indices
        .iter()
        .map(|&i| loader.manifest().samples[i].path.display().to_string())
        .collect();
    Ok(out)
}

pub fn evaluate<C: Classifier + ?Sized>(
    model: &C,
    loader: &mut Loader,
    split: Split,
    averaging: Averaging,
    batch_size: usize,
) -> Result<(MetricsReport, Predictions)> {
    let preds = predict(model, loader, split, batch_size)?;
    Ok((preds.report(averaging)?, preds))
}

/// A trained model and the class names its output columns stand for.
pub struct NamedModel<'a> {
    pub name: String,
    pub model: &'a dyn Classifier,
    pub class_names: Vec<String>,
}

/// Accuracy of model `i` on the test split of dataset `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalMatrix {
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    pub accuracy: Vec<Vec<f64>>,
}

impl CrossEvalMatrix {
    /// Rows are training sources, columns are test sources, values are
    /// accuracies in percent with two decimals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("train\\test");
        for d in &self.datasets {
            out += &format!("\t{d}");
        }
        out.push('\n');
        for (m, row) in self.models.iter().zip(&self.accuracy) {
            out += m;
            for a in row {
                out += &format!("\t{:.2}", 100.0 * a);
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for CrossEvalMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<16}", "train \\ test")?;
        for d in &self.datasets {
            write!(f, "{d:>16}")?;
        }
        for (m, row) in self.models.iter().zip(&self.accuracy) {
            write!(f, "\n{m:<16}")?;
            for a in row {
                write!(f, "{:>15.2}%", 100.0 * a)?;
            }
        }
        Ok(())
    }
}

/// Maps each dataset class to the model output with the same name. Both
/// vocabularies must contain exactly the same names.
pub fn vocab_map(model: &NamedModel<'_>, dataset: &str, dataset_classes: &[String]) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = model
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mismatch = |detail: String| TrainError::VocabMismatch {
        model: model.name.clone(),
        dataset: dataset.to_string(),
        detail,
    };
    if model.class_names.len() != dataset_classes.len() {
        return Err(mismatch(format!(
            "{} model classes vs {} dataset classes",
            model.class_names.len(),
            dataset_classes.len()
        )));
    }
    dataset_classes
        .iter()
        .map(|c| index.get(c.as_str()).copied().ok_or_else(|| mismatch(format!("no class `{c}` in model"))))
        .collect()
}

pub fn cross_eval(
    models: &[NamedModel<'_>],
    datasets: &mut [(String, Loader)],
    split: Split,
    batch_size: usize,
) -> Result<CrossEvalMatrix> {
    let mut accuracy = Vec::new();
    for m in models {
        let mut row = Vec::new();
        for (name, loader) in datasets.iter_mut() {
            let map = vocab_map(m, name, &loader.manifest().class_names)?;
            let p = predict(m.model, loader, split, batch_size)?;
            let hits = p
                .preds
                .iter()
                .zip(&p.labels)
                .filter(|(&pred, &label)| pred == map[label])
                .count();
            row.push(hits as f64 / p.labels.len() as f64);
        }
        accuracy.push(row);
    }
    Ok(CrossEvalMatrix {
        models: models.iter().map(|m| m.name.clone()).collect(),
        datasets: datasets.iter().map(|(n, _)| n.clone()).collect(),
        accuracy,
    })
}
