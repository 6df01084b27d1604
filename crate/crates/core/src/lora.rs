//! Low-rank adapters on the block projections.
//!
//! A frozen projection `W: [d, k]` is augmented with `A: [r, k]` and
//! `B: [d, r]`; the effective weight is `W + (alpha / r)·B·A`. `A` starts
//! Kaiming-uniform and `B` starts at zero, so a freshly injected model computes
//! exactly what its base computes. Dropout, when enabled, acts only on the
//! input of the low-rank path and only in train mode.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::backbone::{is_head, saliency_with, Binding, LinearHook, Model, ModelConfig, ModelError, ParamCount, ParamSpec, Init};
use crate::tensor::{NdArray, Scalar, TensorError};

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("rank {rank} exceeds min({d}, {k})")]
    RankTooLarge { rank: usize, d: usize, k: usize },
    #[error("invalid LoRA config: {0}")]
    InvalidConfig(String),
    #[error("no layer matches targets {0:?}")]
    NoMatchingLayers(Vec<String>),
    #[error("adapter for `{layer}`: {detail}")]
    Incompatible { layer: String, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LoraError> = std::result::Result<T, E>;

fn default_rank() -> usize {
    16
}
fn default_alpha() -> f64 {
    32.0
}
fn default_dropout() -> f64 {
    0.1
}
fn default_targets() -> Vec<String> {
    vec!["fc1".into(), "fc2".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Layer-name suffixes that receive adapters.
    #[serde(default = "default_targets")]
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: default_rank(),
            alpha: default_alpha(),
            dropout: default_dropout(),
            targets: default_targets(),
        }
    }
}

impl LoraConfig {
    pub fn new(rank: usize, alpha: f64, dropout: f64) -> Self {
        Self {
            rank,
            alpha,
            dropout,
            targets: default_targets(),
        }
    }

    /// Effective multiplier of the low-rank path, `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(LoraError::InvalidConfig("rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LoraError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !self.alpha.is_finite() {
            return Err(LoraError::InvalidConfig("alpha must be finite".into()));
        }
        Ok(())
    }

    fn matches(&self, layer: &str) -> bool {
        let leaf = layer.rsplit('.').next().unwrap_or(layer);
        self.targets.iter().any(|t| t == leaf || t == layer)
    }

    /// `(layer, d, k)` for every projection the config targets.
    pub fn matched_layers(&self, model: &ModelConfig) -> Vec<(String, usize, usize)> {
        model
            .projection_layers()
            .into_iter()
            .filter(|(name, _, _)| self.matches(name))
            .collect()
    }
}

pub fn lora_a_name(layer: &str) -> String {
    format!("{layer}.lora_a")
}

pub fn lora_b_name(layer: &str) -> String {
    format!("{layer}.lora_b")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T: Scalar = f32> {
    /// `[r, k]`
    pub a: NdArray<T>,
    /// `[d, r]`
    pub b: NdArray<T>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub target: String,
}

/// Kaiming-uniform `A` (bound `sqrt(6/k)`), zero `B`.
pub fn init_adapter<T: Scalar>(
    d: usize,
    k: usize,
    r: usize,
    alpha: f64,
    dropout_p: f64,
    seed: u64,
) -> Result<LoraAdapter<T>> {
    if r == 0 || r > d.min(k) {
        return Err(LoraError::RankTooLarge { rank: r, d, k });
    }
    LoraConfig::new(r, alpha, dropout_p).validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (6.0 / k as f64).sqrt();
    Ok(LoraAdapter {
        a: NdArray::from_fn([r, k], |_| T::of(rng.random_range(-bound..bound))),
        b: NdArray::zeros([d, r]),
        rank: r,
        alpha,
        dropout_p,
        target: String::new(),
    })
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn out_dim(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn numel(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `(alpha / r)·B·A`, shape `[d, k]`.
    pub fn delta(&self) -> Result<NdArray<T>> {
        let s = T::of(self.scale());
        Ok(self.b.matmul(&self.a)?.map(|v| v * s))
    }

    fn check_weight(&self, w: &NdArray<T>) -> Result<()> {
        if w.shape() != [self.out_dim(), self.in_dim()] {
            return Err(LoraError::Incompatible {
                layer: self.target.clone(),
                detail: format!(
                    "weight {:?} vs adapter [{}, {}]",
                    w.shape(),
                    self.out_dim(),
                    self.in_dim()
                ),
            });
        }
        Ok(())
    }
}

/// `W' = W + (alpha / r)·B·A`.
pub fn merge<T: Scalar>(w: &NdArray<T>, adapter: &LoraAdapter<T>) -> Result<NdArray<T>> {
    adapter.check_weight(w)?;
    Ok(w.zip_map(&adapter.delta()?, |a, b| a + b)?)
}

/// Inverse of [`merge`], up to rounding.
pub fn unmerge<T: Scalar>(merged: &NdArray<T>, adapter: &LoraAdapter<T>) -> Result<NdArray<T>> {
    adapter.check_weight(merged)?;
    Ok(merged.zip_map(&adapter.delta()?, |a, b| a - b)?)
}

fn dropout_mask<T: Scalar>(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> NdArray<T> {
    let keep = T::of(1.0 / (1.0 - p));
    NdArray::from_fn(shape.to_vec(), |_| {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

/// Records `x Wᵀ + b + s·(drop(x) Aᵀ) Bᵀ` on `g`.
#[allow(clippy::too_many_arguments)]
pub fn lora_linear_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    a: Var,
    bm: Var,
    scale: f64,
    mask: Option<NdArray<T>>,
) -> Result<Var> {
    let base = g.linear(x, w, b)?;
    let xin = match mask {
        Some(m) => g.mul_const(x, m)?,
        None => x,
    };
    let h = g.linear(xin, a, None)?;
    let delta = g.linear(h, bm, None)?;
    let delta = g.scale(delta, T::of(scale))?;
    Ok(g.add(base, delta)?)
}

/// Eager adapted projection; dropout only applies when `train_mode` is set.
pub fn adapted_linear<T: Scalar>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    b: &NdArray<T>,
    adapter: &LoraAdapter<T>,
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NdArray<T>> {
    adapter.check_weight(w)?;
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let (av, bmv) = (g.input(adapter.a.clone()), g.input(adapter.b.clone()));
    let mask = (train_mode && adapter.dropout_p > 0.0).then(|| dropout_mask(x.shape(), adapter.dropout_p, rng));
    let out = lora_linear_graph(&mut g, xv, wv, Some(bv), av, bmv, adapter.scale(), mask)?;
    Ok(g.value(out).clone())
}

struct LoraHook<'a> {
    adapters: HashMap<String, (Var, Var, f64, f64)>,
    train_mode: bool,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> LinearHook<T> for LoraHook<'_> {
    fn linear(&mut self, g: &mut Graph<T>, layer: &str, x: Var, w: Var, b: Var) -> crate::backbone::Result<Var> {
        let Some(&(a, bm, scale, p)) = self.adapters.get(layer) else {
            return Ok(g.linear(x, w, Some(b))?);
        };
        let mask = (self.train_mode && p > 0.0).then(|| dropout_mask(g.value(x).shape(), p, self.rng));
        lora_linear_graph(g, x, w, Some(b), a, bm, scale, mask).map_err(|e| match e {
            LoraError::Model(m) => m,
            LoraError::Tensor(t) => ModelError::Tensor(t),
            other => ModelError::InvalidConfig(other.to_string()),
        })
    }
}

/// A frozen backbone plus one adapter per targeted projection. The adapters
/// and the classification head are the only trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PeftModel<T: Scalar = f32> {
    base: Model<T>,
    adapters: IndexMap<String, LoraAdapter<T>>,
    config: LoraConfig,
}

/// Attaches fresh adapters to every projection matching `config.targets` and
/// freezes everything but the head.
pub fn inject<T: Scalar>(model: Model<T>, config: &LoraConfig, seed: u64) -> Result<PeftModel<T>> {
    PeftModel::inject(model, config, seed)
}

impl<T: Scalar> PeftModel<T> {
    pub fn inject(mut model: Model<T>, config: &LoraConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = config.matched_layers(model.config());
        if layers.is_empty() {
            return Err(LoraError::NoMatchingLayers(config.targets.clone()));
        }
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let mut adapters = IndexMap::new();
        for (layer, d, k) in layers {
            let mut ad = init_adapter(d, k, config.rank, config.alpha, config.dropout, seeder.random())?;
            ad.target = layer.clone();
            adapters.insert(layer, ad);
        }
        model.freeze_backbone();
        Ok(Self {
            base: model,
            adapters,
            config: config.clone(),
        })
    }

    /// Reassembles a model from stored adapters, checking every target.
    pub fn from_parts(
        mut base: Model<T>,
        config: LoraConfig,
        adapters: IndexMap<String, LoraAdapter<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let expected: HashMap<String, (usize, usize)> = config
            .matched_layers(base.config())
            .into_iter()
            .map(|(n, d, k)| (n, (d, k)))
            .collect();
        if expected.len() != adapters.len() {
            return Err(LoraError::Incompatible {
                layer: "*".into(),
                detail: format!("{} adapters for {} target layers", adapters.len(), expected.len()),
            });
        }
        for (layer, ad) in &adapters {
            let Some(&(d, k)) = expected.get(layer) else {
                return Err(LoraError::Incompatible {
                    layer: layer.clone(),
                    detail: "no such projection in the base model".into(),
                });
            };
            if ad.a.shape() != [ad.rank, k] || ad.b.shape() != [d, ad.rank] {
                return Err(LoraError::Incompatible {
                    layer: layer.clone(),
                    detail: format!(
                        "A {:?} / B {:?} against projection [{d}, {k}]",
                        ad.a.shape(),
                        ad.b.shape()
                    ),
                });
            }
        }
        base.freeze_backbone();
        Ok(Self {
            base,
            adapters,
            config,
        })
    }

    pub fn base(&self) -> &Model<T> {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut Model<T> {
        &mut self.base
    }

    pub fn into_base(self) -> Model<T> {
        self.base
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn model_config(&self) -> &ModelConfig {
        self.base.config()
    }

    pub fn adapters(&self) -> &IndexMap<String, LoraAdapter<T>> {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut IndexMap<String, LoraAdapter<T>> {
        &mut self.adapters
    }

    pub fn reset_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        self.base.reset_head(num_classes, seed)?;
        Ok(())
    }

    /// Adapter tensors plus the head.
    pub fn count_params(&self) -> ParamCount {
        let adapters: usize = self.adapters.values().map(LoraAdapter::numel).sum();
        self.base.count_params()
            + ParamCount {
                total: adapters,
                trainable: adapters,
            }
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapters.values().map(LoraAdapter::numel).sum()
    }

    /// Every tensor the optimizer may touch, in a stable order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .base
            .params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect();
        for layer in self.adapters.keys() {
            names.push(lora_a_name(layer));
            names.push(lora_b_name(layer));
        }
        names
    }

    pub fn tensor(&self, name: &str) -> Option<&NdArray<T>> {
        if let Some(layer) = name.strip_suffix(".lora_a") {
            return self.adapters.get(layer).map(|a| &a.a);
        }
        if let Some(layer) = name.strip_suffix(".lora_b") {
            return self.adapters.get(layer).map(|a| &a.b);
        }
        self.base.param(name).ok()
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut NdArray<T>> {
        if let Some(layer) = name.strip_suffix(".lora_a") {
            return self.adapters.get_mut(layer).map(|a| &mut a.a);
        }
        if let Some(layer) = name.strip_suffix(".lora_b") {
            return self.adapters.get_mut(layer).map(|a| &mut a.b);
        }
        self.base.param_mut(name).ok()
    }

    /// Records the adapted forward pass; returns the logits and the graph
    /// handles of every trainable tensor.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        train_mode: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        let binding: Binding = self.base.bind(g, |_, p| p.trainable);
        let mut trainable: Vec<(String, Var)> = binding
            .iter()
            .filter(|(n, _)| self.base.is_trainable(n))
            .map(|(n, v)| (n.to_string(), v))
            .collect();
        let mut map = HashMap::new();
        for (layer, ad) in &self.adapters {
            let a = g.param(ad.a.clone());
            let b = g.param(ad.b.clone());
            trainable.push((lora_a_name(layer), a));
            trainable.push((lora_b_name(layer), b));
            map.insert(layer.clone(), (a, b, ad.scale(), ad.dropout_p));
        }
        let mut hook = LoraHook {
            adapters: map,
            train_mode,
            rng,
        };
        let logits = self.base.forward_graph(g, &binding, x, &mut hook)?;
        Ok((logits, trainable))
    }

    pub fn forward(&self, x: &NdArray<T>, train_mode: bool, rng: &mut ChaCha8Rng) -> Result<NdArray<T>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (out, _) = self.forward_graph(&mut g, xv, train_mode, rng)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &NdArray<T>) -> Result<NdArray<T>> {
        self.forward(x, false, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// Folds every adapter into its projection, giving a plain model with the
    /// same eval-mode behavior.
    pub fn merged(&self) -> Result<Model<T>> {
        let mut model = self.base.clone();
        for (layer, ad) in &self.adapters {
            let w = model.param_mut(&format!("{layer}.weight"))?;
            *w = merge(w, ad)?;
        }
        model.set_trainable(|_| true);
        Ok(model)
    }

    pub fn saliency(&self, image: &NdArray<T>, class_idx: usize) -> Result<NdArray<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(saliency_with(image, class_idx, |g, x| {
            self.forward_graph(g, x, false, &mut rng)
                .map(|(v, _)| v)
                .map_err(|e| match e {
                    LoraError::Model(m) => m,
                    other => ModelError::InvalidConfig(other.to_string()),
                })
        })?)
    }
}

/// Adapter tensors the config would create on `model`, without allocating.
pub fn adapter_layout(model: &ModelConfig, config: &LoraConfig) -> Vec<ParamSpec> {
    let r = config.rank;
    config
        .matched_layers(model)
        .into_iter()
        .flat_map(|(layer, d, k)| {
            [
                ParamSpec {
                    name: lora_a_name(&layer),
                    shape: vec![r, k],
                    init: Init::KaimingUniform,
                },
                ParamSpec {
                    name: lora_b_name(&layer),
                    shape: vec![d, r],
                    init: Init::Zeros,
                },
            ]
        })
        .collect()
}

/// Parameter accounting from shapes alone. With LoRA, only adapters and the
/// head count as trainable.
pub fn count_params_meta(model: &ModelConfig, lora: Option<&LoraConfig>) -> ParamCount {
    let base = model.layout();
    let total_base: usize = base.iter().map(ParamSpec::numel).sum();
    match lora {
        None => ParamCount {
            total: total_base,
            trainable: total_base,
        },
        Some(cfg) => {
            let adapters: usize = adapter_layout(model, cfg).iter().map(ParamSpec::numel).sum();
            let head: usize = base.iter().filter(|p| is_head(&p.name)).map(ParamSpec::numel).sum();
            ParamCount {
                total: total_base + adapters,
                trainable: adapters + head,
            }
        }
    }
}
