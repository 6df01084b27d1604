//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive executed on it. [`Graph::backward`]
//! replays the tape once in reverse order, accumulating gradients additively
//! into every value that requires them.

mod check;
pub mod kernels;

pub use check::{grad_check, grad_check_sampled, GradCheckReport};

use crate::tensor::{shape_err, NdArray, Result, Scalar, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward closure: `(grad_out, inputs, output, needs) -> grads per input`.
type BackwardFn<T> =
    Box<dyn Fn(&NdArray<T>, &[&NdArray<T>], &NdArray<T>, &[bool]) -> Vec<Option<NdArray<T>>>>;

struct Node<T> {
    op: &'static str,
    value: NdArray<T>,
    parents: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<NdArray<T>>>,
    visited: Vec<&'static str>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&NdArray<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<NdArray<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Primitives whose backward ran, in execution order of the backward pass.
    pub fn visited(&self) -> &[&'static str] {
        &self.visited
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf; no gradient is tracked for it.
    pub fn input(&mut self, value: NdArray<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: NdArray<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: NdArray<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_requires(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    fn record(
        &mut self,
        op: &'static str,
        value: NdArray<T>,
        parents: Vec<Var>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(op));
        }
        let requires_grad = self.any_requires(&parents);
        self.nodes.push(Node {
            op,
            value,
            parents,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass seeded with ones at `output` (gradient of its sum).
    pub fn backward(&self, output: Var) -> Result<Grads<T>> {
        let mut grads: Vec<Option<NdArray<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        grads[output.0] = Some(NdArray::ones(self.nodes[output.0].value.shape().to_vec()));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(gout) = grads[id].as_ref() else {
                continue;
            };
            let inputs: Vec<&NdArray<T>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward(gout, &inputs, &node.value, &needs);
            visited.push(node.op);
            for ((p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                if !g.all_finite() {
                    return Err(TensorError::NonFinite(node.op));
                }
                match grads[p.0].as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => grads[p.0] = Some(g),
                }
            }
        }
        Ok(Grads { grads, visited })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.record(
            "add",
            value,
            vec![a, b],
            Box::new(|g, _, _, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|v| v * s);
        self.record(
            "scale",
            value,
            vec![a],
            Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * s))]),
        )
    }

    /// Elementwise product with a constant array (dropout masks, selectors).
    pub fn mul_const(&mut self, a: Var, c: NdArray<T>) -> Result<Var> {
        let value = self.value(a).zip_map(&c, |x, y| x * y)?;
        self.record(
            "mul_const",
            value,
            vec![a],
            Box::new(move |g, _, _, _| vec![Some(g.zip_map(&c, |x, y| x * y).unwrap())]),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = NdArray::scalar(self.value(a).sum());
        self.record(
            "sum",
            value,
            vec![a],
            Box::new(|g, inputs, _, _| {
                vec![Some(NdArray::full(inputs[0].shape().to_vec(), g.data()[0]))]
            }),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.record(
            "permute",
            value,
            vec![a],
            Box::new(move |g, _, _, _| vec![Some(g.permute(&inverse).unwrap())]),
        )
    }

    /// Affine map over the last axis: `x Wᵀ + b` with `W: [d, k]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.record(
            "linear",
            value,
            parents,
            Box::new(|g, inputs, _, needs| {
                let need_b = needs.get(2).copied().unwrap_or(false);
                let grads = kernels::linear_backward(g, inputs[0], inputs[1], [needs[0], needs[1], need_b]);
                let mut out = vec![grads.x, grads.w];
                if inputs.len() == 3 {
                    out.push(grads.b);
                }
                out
            }),
        )
    }

    fn conv(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> Result<Var> {
        let geom = kernels::conv_geometry(
            self.value(x),
            self.value(k),
            bias.map(|b| self.value(b)),
            stride,
            pad,
            depthwise,
        )?;
        let value = kernels::conv_forward(self.value(x), self.value(k), bias.map(|b| self.value(b)), &geom);
        let mut parents = vec![x, k];
        parents.extend(bias);
        self.record(
            if depthwise { "depthwise_conv2d" } else { "conv2d" },
            value,
            parents,
            Box::new(move |g, inputs, _, needs| {
                let need_b = needs.get(2).copied().unwrap_or(false);
                let grads = kernels::conv_backward(g, inputs[0], inputs[1], &geom, [needs[0], needs[1], need_b]);
                let mut out = vec![grads.x, grads.k];
                if inputs.len() == 3 {
                    out.push(grads.b);
                }
                out
            }),
        )
    }

    /// Dense 2-d cross-correlation, NCHW input, `[O, C, kh, kw]` kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv(x, k, bias, stride, pad, false)
    }

    /// Per-channel stride-1 cross-correlation with a `[C, 1, kh, kw]` kernel.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, pad: usize) -> Result<Var> {
        self.conv(x, k, bias, 1, pad, true)
    }

    /// Normalizes over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, saved) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.record(
            "layer_norm",
            value,
            vec![x, gamma, beta],
            Box::new(move |g, inputs, _, needs| {
                kernels::layer_norm_backward(g, inputs[1], &saved, [needs[0], needs[1], needs[2]]).into()
            }),
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = kernels::gelu(self.value(x));
        self.record(
            "gelu",
            value,
            vec![x],
            Box::new(|g, inputs, _, _| {
                vec![Some(g.zip_map(inputs[0], |gv, xv| gv * kernels::gelu_grad_scalar(xv)).unwrap())]
            }),
        )
    }

    /// Global response normalization on channel-last input.
    pub fn grn(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, saved) = kernels::grn(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.record(
            "grn",
            value,
            vec![x, gamma, beta],
            Box::new(move |g, inputs, _, needs| {
                kernels::grn_backward(g, inputs[0], inputs[1], &saved, [needs[0], needs[1], needs[2]]).into()
            }),
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = kernels::global_avg_pool(self.value(x))?;
        self.record(
            "global_avg_pool",
            value,
            vec![x],
            Box::new(|g, inputs, _, _| vec![Some(kernels::global_avg_pool_backward(g, inputs[0].shape()))]),
        )
    }

    /// Mean softmax cross-entropy; the result is a one-element array.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        let labels = labels.to_vec();
        self.record(
            "softmax_cross_entropy",
            NdArray::scalar(loss),
            vec![logits],
            Box::new(move |g, _, _, _| {
                let k = probs.last_dim();
                let scale = g.data()[0] / T::of(labels.len() as f64);
                let mut d = probs.clone();
                for (row, &y) in d.data_mut().chunks_mut(k).zip(&labels) {
                    row[y] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Selects `logits[row, col]` of a 2-d value as a one-element array.
    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let v = self.value(x);
        let &[n, k] = v.shape() else {
            return Err(shape_err("pick", format!("expected 2-d, got {:?}", v.shape())));
        };
        if row >= n || col >= k {
            return Err(TensorError::Invalid {
                op: "pick",
                detail: format!("({row}, {col}) outside [{n}, {k}]"),
            });
        }
        let mut onehot = NdArray::zeros([n, k]);
        onehot.data_mut()[row * k + col] = T::one();
        let masked = self.mul_const(x, onehot)?;
        self.sum(masked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(NdArray::from_f64([2], &[1.0, -2.0]).unwrap());
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_visits_each_primitive_once_in_reverse() {
        let mut g = Graph::<f64>::new();
        let x = g.param(NdArray::from_f64([1, 2], &[0.3, -0.1]).unwrap());
        let w = g.input(NdArray::eye(2));
        let h = g.linear(x, w, None).unwrap();
        let a = g.gelu(h).unwrap();
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.visited(), &["sum", "gelu", "linear"]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(NdArray::ones([1, 2]));
        let w = g.param(NdArray::eye(2));
        let y = g.linear(x, w, None).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.input(NdArray::from_f64([1], &[f64::MAX]).unwrap());
        assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite("scale"))));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::<f64>::new();
        let z = g.param(NdArray::from_f64([1, 2], &[0.0, 3f64.ln()]).unwrap());
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        let grads = g.backward(l).unwrap();
        let d = grads.get(z).unwrap().data();
        assert!((d[0] + 0.75).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }
}
