//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{NdArray, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGrad(String),
    #[error("gradient for `{name}` has shape {grad:?}, parameter has {param:?}")]
    ShapeMismatch {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("invalid optimizer setting: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let (b1, b2) = self.betas;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(OptimError::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(OptimError::Invalid(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(OptimError::Invalid("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Norm scales and biases are 1-D; they are never decayed.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() > 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-tensor first and second moments plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub t: u64,
    pub moments: HashMap<String, Moments>,
}

/// One update of a single tensor at step `t ≥ 1`. The decay is applied
/// first, `p ← p − lr·wd·p`, followed by the bias-corrected Adam step.
pub fn adamw_update<T: Scalar>(
    param: &mut NdArray<T>,
    grad: &NdArray<T>,
    moments: &mut Moments,
    t: u64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let shrink = if decay { 1.0 - cfg.lr * cfg.weight_decay } else { 1.0 };
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(&mut moments.m)
        .zip(&mut moments.v)
    {
        let g = g.to_f64();
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let step = cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
        *p = T::of(p.to_f64() * shrink - step);
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self, OptimError> {
        config.validate()?;
        Ok(Self {
            config,
            state: AdamWState::default(),
        })
    }

    fn check<T: Scalar>(name: &str, param: &NdArray<T>, grad: &NdArray<T>) -> Result<(), OptimError> {
        if param.shape() != grad.shape() {
            return Err(OptimError::ShapeMismatch {
                name: name.to_string(),
                grad: grad.shape().to_vec(),
                param: param.shape().to_vec(),
            });
        }
        if !grad.all_finite() {
            return Err(OptimError::NonFiniteGrad(name.to_string()));
        }
        Ok(())
    }

    fn update<T: Scalar>(&mut self, name: &str, param: &mut NdArray<T>, grad: &NdArray<T>) {
        let moments = self.state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        let decay = decays(param.shape());
        adamw_update(param, grad, moments, self.state.t, &self.config, decay);
    }

    /// Applies one step to every `(name, param, grad)` triple. All gradients are
    /// validated before any parameter moves.
    pub fn step<'a, T: Scalar>(
        &mut self,
        updates: impl IntoIterator<Item = (&'a str, &'a mut NdArray<T>, &'a NdArray<T>)>,
    ) -> Result<(), OptimError> {
        let updates: Vec<_> = updates.into_iter().collect();
        for (name, p, g) in &updates {
            Self::check(name, p, g)?;
        }
        self.state.t += 1;
        for (name, p, g) in updates {
            self.update(name, p, g);
        }
        Ok(())
    }

    /// Like [`step`](Self::step) for tensors looked up by name in `store`.
    pub fn apply<T: Scalar, S: ParamStore<T> + ?Sized>(
        &mut self,
        store: &mut S,
        grads: &[(String, NdArray<T>)],
    ) -> Result<(), OptimError> {
        for (name, g) in grads {
            let p = store.tensor_mut(name).ok_or_else(|| OptimError::Invalid(format!("unknown tensor `{name}`")))?;
            Self::check(name, p, g)?;
        }
        self.state.t += 1;
        for (name, g) in grads {
            let p = store.tensor_mut(name).expect("checked above");
            self.update(name, p, g);
        }
        Ok(())
    }
}

/// Named, mutable access to the tensors an optimizer updates.
pub trait ParamStore<T: Scalar> {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut NdArray<T>>;
}

impl<T: Scalar> ParamStore<T> for HashMap<String, NdArray<T>> {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut NdArray<T>> {
        self.get_mut(name)
    }
}
