//! Finite-difference check of a few primitives and of a whole toy model.
//!
//! cargo run --release --example gradient_check

use convnext_lora::autograd::{grad_check, grad_check_sampled, Graph, Var};
use convnext_lora::backbone::{Binding, Model, ModelConfig, PlainLinear};
use convnext_lora::tensor::{NdArray, Result, TensorError};

fn ramp(shape: &[usize], phase: f64) -> NdArray<f64> {
    NdArray::from_fn(shape.to_vec(), |i| (i as f64 * 0.61 + phase).sin())
}

fn main() -> Result<()> {
    let ln = grad_check(
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6),
        &[ramp(&[4, 6], 0.0), ramp(&[6], 1.0), ramp(&[6], 2.0)],
        1e-5,
    )?;
    println!("layer_norm: max rel error {:.2e} over {} coordinates", ln.max_rel_error, ln.checked);

    let grn = grad_check(
        |g, v| g.grn(v[0], v[1], v[2], 1e-6),
        &[ramp(&[2, 3, 3, 5], 0.3), ramp(&[5], 1.0), ramp(&[5], 2.0)],
        1e-5,
    )?;
    println!("grn:        max rel error {:.2e} over {} coordinates", grn.max_rel_error, grn.checked);

    let model = Model::<f64>::build(&ModelConfig::toy(4), 0).map_err(|e| TensorError::Invalid {
        op: "build",
        detail: e.to_string(),
    })?;
    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut inputs = vec![ramp(&[2, 3, 32, 32], 0.5)];
    inputs.extend(names.iter().map(|n| model.param(n).unwrap().clone()));
    let loss = |g: &mut Graph<f64>, v: &[Var]| {
        let binding: Binding = names.iter().cloned().zip(v[1..].iter().copied()).collect();
        let logits = model
            .forward_graph(g, &binding, v[0], &mut PlainLinear)
            .map_err(|e| TensorError::Invalid { op: "forward", detail: e.to_string() })?;
        g.softmax_cross_entropy(logits, &[1, 3])
    };
    let whole = grad_check_sampled(loss, &inputs, 1e-5, 4, 0)?;
    println!(
        "toy model:  max rel error {:.2e} over {} sampled coordinates of {} tensors",
        whole.max_rel_error,
        whole.checked,
        inputs.len()
    );
    Ok(())
}
