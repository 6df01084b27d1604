//! ConvNeXtV2 classifier.
//!
//! Layout: a 4×4/stride-4 patch-embedding stem followed by LayerNorm, four
//! stages of ConvNeXt blocks with a LayerNorm + 2×2/stride-2 downsample in
//! front of stages 2–4, then global average pooling, a final LayerNorm and a
//! linear head.
//!
//! A block computes `x + fc2(grn(gelu(fc1(norm(dwconv(x))))))`. The depthwise
//! convolution runs channel-first; everything from the norm to `fc2` runs
//! channel-last.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::tensor::{NdArray, Scalar, TensorError};

/// Epsilon shared by every LayerNorm and GRN layer.
pub const NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;
pub const DWCONV_KERNEL: usize = 7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("input shape {actual:?} does not match expected {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

fn default_in_channels() -> usize {
    3
}
fn default_image_size() -> usize {
    224
}
fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depths: Vec<usize>,
    pub dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl ModelConfig {
    /// ConvNeXtV2-Base.
    pub fn base(num_classes: usize) -> Self {
        Self {
            depths: vec![3, 3, 27, 3],
            dims: vec![128, 256, 512, 1024],
            num_classes,
            in_channels: 3,
            image_size: 224,
            mlp_ratio: 4,
        }
    }

    /// ConvNeXtV2-Tiny.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            depths: vec![3, 3, 9, 3],
            dims: vec![96, 192, 384, 768],
            ..Self::base(num_classes)
        }
    }

    /// Desk-scale configuration used by the tests and examples.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            depths: vec![1, 1, 1, 1],
            dims: vec![8, 16, 32, 64],
            num_classes,
            in_channels: 3,
            image_size: 32,
            mlp_ratio: 4,
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Option<Self> {
        match name {
            "base" => Some(Self::base(num_classes)),
            "tiny" => Some(Self::tiny(num_classes)),
            "toy" => Some(Self::toy(num_classes)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.depths.len() != 4 || self.dims.len() != 4 {
            return bad(format!(
                "depths and dims need exactly 4 entries, got {} and {}",
                self.depths.len(),
                self.dims.len()
            ));
        }
        if self.depths.iter().chain(&self.dims).any(|&v| v == 0) {
            return bad("depths and dims must be positive".into());
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.mlp_ratio == 0 {
            return bad("num_classes, in_channels and mlp_ratio must be positive".into());
        }
        // stem /4 then three /2 downsamples
        if self.image_size < 32 || self.image_size % 32 != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            ));
        }
        Ok(())
    }

    pub fn hidden_dim(&self, stage: usize) -> usize {
        self.dims[stage] * self.mlp_ratio
    }

    /// Every parameter tensor in canonical order, without allocating it.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            out.push(ParamSpec { name, shape, init })
        };
        let d0 = self.dims[0];
        push("stem.conv.weight".into(), vec![d0, self.in_channels, 4, 4], Init::TruncNormal);
        push("stem.conv.bias".into(), vec![d0], Init::Zeros);
        push("stem.norm.weight".into(), vec![d0], Init::Ones);
        push("stem.norm.bias".into(), vec![d0], Init::Zeros);
        for s in 0..4 {
            let d = self.dims[s];
            if s > 0 {
                let prev = self.dims[s - 1];
                push(format!("downsample.{s}.norm.weight"), vec![prev], Init::Ones);
                push(format!("downsample.{s}.norm.bias"), vec![prev], Init::Zeros);
                push(format!("downsample.{s}.conv.weight"), vec![d, prev, 2, 2], Init::TruncNormal);
                push(format!("downsample.{s}.conv.bias"), vec![d], Init::Zeros);
            }
            let h = self.hidden_dim(s);
            for b in 0..self.depths[s] {
                let p = block_prefix(s, b);
                let k = DWCONV_KERNEL;
                push(format!("{p}.dwconv.weight"), vec![d, 1, k, k], Init::TruncNormal);
                push(format!("{p}.dwconv.bias"), vec![d], Init::Zeros);
                push(format!("{p}.norm.weight"), vec![d], Init::Ones);
                push(format!("{p}.norm.bias"), vec![d], Init::Zeros);
                push(format!("{p}.fc1.weight"), vec![h, d], Init::TruncNormal);
                push(format!("{p}.fc1.bias"), vec![h], Init::Zeros);
                push(format!("{p}.grn.gamma"), vec![h], Init::Zeros);
                push(format!("{p}.grn.beta"), vec![h], Init::Zeros);
                push(format!("{p}.fc2.weight"), vec![d, h], Init::TruncNormal);
                push(format!("{p}.fc2.bias"), vec![d], Init::Zeros);
            }
        }
        let last = self.dims[3];
        push("norm.weight".into(), vec![last], Init::Ones);
        push("norm.bias".into(), vec![last], Init::Zeros);
        push(HEAD_WEIGHT.into(), vec![self.num_classes, last], Init::TruncNormal);
        push(HEAD_BIAS.into(), vec![self.num_classes], Init::Zeros);
        out
    }

    /// The `fc1`/`fc2` projections of every block as `(layer, out_dim, in_dim)`.
    pub fn projection_layers(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for s in 0..4 {
            let (d, h) = (self.dims[s], self.hidden_dim(s));
            for b in 0..self.depths[s] {
                let p = block_prefix(s, b);
                out.push((format!("{p}.fc1"), h, d));
                out.push((format!("{p}.fc2"), d, h));
            }
        }
        out
    }

    /// Whether `other` has the same backbone (everything except the head).
    pub fn same_backbone(&self, other: &Self) -> bool {
        self.depths == other.depths
            && self.dims == other.dims
            && self.in_channels == other.in_channels
            && self.image_size == other.image_size
            && self.mlp_ratio == other.mlp_ratio
    }
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("stages.{stage}.blocks.{block}")
}

pub fn is_head(name: &str) -> bool {
    name == HEAD_WEIGHT || name == HEAD_BIAS
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
    /// uniform in `±sqrt(6 / fan_in)`
    KaimingUniform,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Truncated normal at ±2 standard deviations.
pub(crate) fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> NdArray<T> {
    NdArray::from_fn(shape, |_| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub value: NdArray<T>,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
}

impl std::ops::Add for ParamCount {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self {
            total: self.total + rhs.total,
            trainable: self.trainable + rhs.trainable,
        }
    }
}

/// Lets callers substitute the `fc1`/`fc2` projections (LoRA does this).
pub trait LinearHook<T: Scalar> {
    fn linear(&mut self, g: &mut Graph<T>, layer: &str, x: Var, w: Var, b: Var) -> Result<Var>;
}

pub struct PlainLinear;

impl<T: Scalar> LinearHook<T> for PlainLinear {
    fn linear(&mut self, g: &mut Graph<T>, _layer: &str, x: Var, w: Var, b: Var) -> Result<Var> {
        Ok(g.linear(x, w, Some(b))?)
    }
}

/// Graph handles for a model's parameters.
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Binds caller-created vars, e.g. the inputs of a gradient check.
impl FromIterator<(String, Var)> for Binding {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    params: IndexMap<String, Param<T>>,
}

/// Deterministic initialization: truncated normal (std 0.02) weights, zero
/// biases and GRN parameters, unit norm gains. Everything starts trainable.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    Model::build(config, seed)
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layout()
            .into_iter()
            .map(|spec| {
                let value = match spec.init {
                    Init::TruncNormal => trunc_normal(&mut rng, spec.shape, INIT_STD),
                    Init::Zeros => NdArray::zeros(spec.shape),
                    Init::Ones => NdArray::ones(spec.shape),
                    Init::KaimingUniform => {
                        let bound = (6.0 / spec.shape[1..].iter().product::<usize>() as f64).sqrt();
                        NdArray::from_fn(spec.shape, |_| T::of(rng.random_range(-bound..bound)))
                    }
                };
                (
                    spec.name,
                    Param {
                        value,
                        trainable: true,
                    },
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Assembles a model from named tensors, checking them against the layout.
    pub fn from_tensors(
        config: &ModelConfig,
        mut tensors: IndexMap<String, NdArray<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = IndexMap::new();
        for spec in config.layout() {
            let value = tensors
                .shift_remove(&spec.name)
                .ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
            if value.shape() != spec.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: spec.name,
                    expected: spec.shape,
                    actual: value.shape().to_vec(),
                });
            }
            params.insert(
                spec.name,
                Param {
                    value,
                    trainable: true,
                },
            );
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(ModelError::InvalidConfig(format!(
                "unexpected tensor `{extra}`"
            )));
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Param<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&NdArray<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut NdArray<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, mut pred: impl FnMut(&str) -> bool) {
        for (name, p) in &mut self.params {
            p.trainable = pred(name);
        }
    }

    /// Freezes every tensor except the classification head.
    pub fn freeze_backbone(&mut self) {
        self.set_trainable(is_head);
    }

    pub fn count_params(&self) -> ParamCount {
        self.params.values().fold(ParamCount::default(), |acc, p| ParamCount {
            total: acc.total + p.value.len(),
            trainable: acc.trainable + if p.trainable { p.value.len() } else { 0 },
        })
    }

    /// Replaces the head with a freshly initialized one for `num_classes`.
    pub fn reset_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(ModelError::InvalidConfig("num_classes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.config.dims[3];
        let trainable = self.is_trainable(HEAD_WEIGHT);
        self.config.num_classes = num_classes;
        self.params.insert(
            HEAD_WEIGHT.into(),
            Param {
                value: trunc_normal(&mut rng, vec![num_classes, dim], INIT_STD),
                trainable,
            },
        );
        self.params.insert(
            HEAD_BIAS.into(),
            Param {
                value: NdArray::zeros([num_classes]),
                trainable,
            },
        );
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Registers every parameter on `g`; those for which `track` returns true
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, mut track: impl FnMut(&str, &Param<T>) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = if track(name, p) {
                    g.param(p.value.clone())
                } else {
                    g.input(p.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Binding { vars }
    }

    pub fn expected_input_shape(&self, batch: usize) -> Vec<usize> {
        let c = &self.config;
        vec![batch, c.in_channels, c.image_size, c.image_size]
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let batch = shape.first().copied().unwrap_or(0);
        let expected = self.expected_input_shape(batch);
        if shape != expected.as_slice() || batch == 0 {
            return Err(ModelError::InputShape {
                expected,
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Records the forward pass on `g` and returns the logits `[N, K]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        x: Var,
        hook: &mut dyn LinearHook<T>,
    ) -> Result<Var> {
        self.check_input(g.value(x).shape())?;
        let mut h = g.conv2d(x, p.get("stem.conv.weight")?, Some(p.get("stem.conv.bias")?), 4, 0)?;
        h = channels_first_norm(g, h, p.get("stem.norm.weight")?, p.get("stem.norm.bias")?)?;
        for s in 0..4 {
            if s > 0 {
                let pre = format!("downsample.{s}");
                h = channels_first_norm(
                    g,
                    h,
                    p.get(&format!("{pre}.norm.weight"))?,
                    p.get(&format!("{pre}.norm.bias"))?,
                )?;
                h = g.conv2d(
                    h,
                    p.get(&format!("{pre}.conv.weight"))?,
                    Some(p.get(&format!("{pre}.conv.bias"))?),
                    2,
                    0,
                )?;
            }
            for b in 0..self.config.depths[s] {
                h = block(g, p, &block_prefix(s, b), h, hook)?;
            }
        }
        let pooled = g.global_avg_pool(h)?;
        let pooled = g.layer_norm(pooled, p.get("norm.weight")?, p.get("norm.bias")?, NORM_EPS)?;
        Ok(g.linear(pooled, p.get(HEAD_WEIGHT)?, Some(p.get(HEAD_BIAS)?))?)
    }

    /// Logits for a batch. The plain backbone has no stochastic layers, so
    /// `train_mode` does not change the result.
    pub fn forward(&self, x: &NdArray<T>, _train_mode: bool) -> Result<NdArray<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_, _| false);
        let xv = g.input(x.clone());
        let out = self.forward_graph(&mut g, &p, xv, &mut PlainLinear)?;
        Ok(g.value(out).clone())
    }

    /// Input-gradient saliency of `class_idx` for one `[C, H, W]` image.
    pub fn saliency(&self, image: &NdArray<T>, class_idx: usize) -> Result<NdArray<T>> {
        saliency_with(image, class_idx, |g, x| {
            let p = self.bind(g, |_, _| false);
            self.forward_graph(g, &p, x, &mut PlainLinear)
        })
    }
}

/// LayerNorm over the channel axis of an NCHW tensor.
fn channels_first_norm<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.permute(x, &[0, 2, 3, 1])?;
    let h = g.layer_norm(h, w, b, NORM_EPS)?;
    Ok(g.permute(h, &[0, 3, 1, 2])?)
}

fn block<T: Scalar>(
    g: &mut Graph<T>,
    p: &Binding,
    prefix: &str,
    x: Var,
    hook: &mut dyn LinearHook<T>,
) -> Result<Var> {
    let name = |s: &str| format!("{prefix}.{s}");
    let pad = DWCONV_KERNEL / 2;
    let h = g.depthwise_conv2d(x, p.get(&name("dwconv.weight"))?, Some(p.get(&name("dwconv.bias"))?), pad)?;
    let h = g.permute(h, &[0, 2, 3, 1])?;
    let h = g.layer_norm(h, p.get(&name("norm.weight"))?, p.get(&name("norm.bias"))?, NORM_EPS)?;
    let h = hook.linear(g, &name("fc1"), h, p.get(&name("fc1.weight"))?, p.get(&name("fc1.bias"))?)?;
    let h = g.gelu(h)?;
    let h = g.grn(h, p.get(&name("grn.gamma"))?, p.get(&name("grn.beta"))?, NORM_EPS)?;
    let h = hook.linear(g, &name("fc2"), h, p.get(&name("fc2.weight"))?, p.get(&name("fc2.bias"))?)?;
    let h = g.permute(h, &[0, 3, 1, 2])?;
    Ok(g.add(x, h)?)
}

/// Saliency for any differentiable classifier: the absolute gradient of the
/// chosen logit with respect to the input, max over channels, min-max scaled
/// to `[0, 1]`. An identically zero gradient yields an all-zero map.
pub fn saliency_with<T: Scalar>(
    image: &NdArray<T>,
    class_idx: usize,
    logits: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<NdArray<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(ModelError::InputShape {
            expected: vec![3, 0, 0],
            actual: image.shape().to_vec(),
        });
    };
    let mut g = Graph::new();
    let x = g.param(image.clone().reshape([1, c, h, w])?);
    let out = logits(&mut g, x)?;
    let k = g.value(out).last_dim();
    if class_idx >= k {
        return Err(ModelError::ClassOutOfRange {
            class: class_idx,
            num_classes: k,
        });
    }
    let sel = g.pick(out, 0, class_idx)?;
    let grads = g.backward(sel)?;
    let zero = NdArray::zeros([1, c, h, w]);
    let grad = grads.get(x).unwrap_or(&zero).data();
    let plane = h * w;
    let mut map: Vec<T> = (0..plane)
        .map(|i| (0..c).map(|ch| grad[ch * plane + i].abs()).fold(T::zero(), T::max))
        .collect();
    let lo = map.iter().copied().fold(T::infinity(), T::min);
    let hi = map.iter().copied().fold(T::zero(), T::max);
    if hi == T::zero() {
        map.fill(T::zero());
    } else if hi == lo {
        map.fill(T::one());
    } else {
        for v in &mut map {
            *v = (*v - lo) / (hi - lo);
        }
    }
    Ok(NdArray::new([h, w], map)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::toy(4).validate().is_ok());
        let mut c = ModelConfig::toy(4);
        c.depths = vec![1, 1, 1];
        assert!(matches!(Model::<f32>::build(&c, 0), Err(ModelError::InvalidConfig(_))));
        let mut c = ModelConfig::toy(4);
        c.image_size = 48;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(4);
        c.dims[2] = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::<f32>::build(&ModelConfig::toy(3), 7).unwrap();
        let b = Model::<f32>::build(&ModelConfig::toy(3), 7).unwrap();
        let c = Model::<f32>::build(&ModelConfig::toy(3), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = a.param("stages.0.blocks.0.fc1.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(a.param("stages.0.blocks.0.grn.gamma").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.param("norm.weight").unwrap().data().iter().all(|&v| v == 1.0));
        let count = a.count_params();
        assert_eq!(count.total, count.trainable);
    }

    #[test]
    fn projections_have_mlp_ratio_shapes() {
        let c = ModelConfig::toy(2);
        for (layer, d, k) in c.projection_layers() {
            let m = if layer.ends_with("fc1") { (4 * k, k) } else { (d, 4 * d) };
            assert_eq!((d, k), m, "{layer}");
        }
    }

    #[test]
    fn forward_shape_and_errors() {
        let m = Model::<f32>::build(&ModelConfig::toy(4), 1).unwrap();
        let x = NdArray::from_fn([2, 3, 32, 32], |i| ((i % 17) as f32) * 0.1);
        assert_eq!(m.forward(&x, false).unwrap().shape(), &[2, 4]);
        let bad = NdArray::<f32>::zeros([1, 3, 16, 16]);
        assert!(matches!(m.forward(&bad, false), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn saliency_class_must_exist() {
        let m = Model::<f64>::build(&ModelConfig::toy(4), 1).unwrap();
        let img = NdArray::zeros([3, 32, 32]);
        assert!(matches!(m.saliency(&img, 4), Err(ModelError::ClassOutOfRange { .. })));
    }

    #[test]
    fn from_tensors_rejects_missing_and_misshapen() {
        let m = Model::<f32>::build(&ModelConfig::toy(2), 0).unwrap();
        let mut t: IndexMap<String, NdArray<f32>> =
            m.params().iter().map(|(k, p)| (k.clone(), p.value.clone())).collect();
        assert_eq!(Model::from_tensors(m.config(), t.clone()).unwrap(), m);
        t.insert(HEAD_BIAS.into(), NdArray::zeros([3]));
        assert!(matches!(Model::from_tensors(m.config(), t.clone()), Err(ModelError::ParamShape { .. })));
        t.shift_remove(HEAD_BIAS);
        assert!(matches!(Model::from_tensors(m.config(), t), Err(ModelError::MissingParam(_))));
    }
}
