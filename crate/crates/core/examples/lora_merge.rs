//! Attaches LoRA adapters to a toy model, perturbs them, and folds them into
//! the projection weights.
//!
//! cargo run --release --example lora_merge

use convnext_lora::backbone::{Model, ModelConfig};
use convnext_lora::lora::{inject, LoraConfig};
use convnext_lora::tensor::NdArray;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = Model::<f32>::build(&ModelConfig::toy(5), 1)?;
    let mut peft = inject(base, &LoraConfig::new(4, 8.0, 0.1), 1)?;
    let x = NdArray::from_fn([2, 3, 32, 32], |i| ((i % 97) as f32 / 48.0) - 1.0);

    // B starts at zero, so the adapted model matches the frozen base exactly
    let gap = peft.predict(&x)?.max_abs_diff(&peft.base().forward(&x, false)?)?;
    println!("right after inject: max |adapted - base| = {gap:e}");

    for (i, ad) in peft.adapters_mut().values_mut().enumerate() {
        ad.b = NdArray::from_fn(ad.b.shape().to_vec(), |j| 0.05 * ((i * 31 + j) as f32).sin());
    }
    let merged = peft.merged()?;
    let adapted = peft.predict(&x)?;
    let gap = adapted.max_abs_diff(&merged.forward(&x, false)?)?;
    let moved = adapted.max_abs_diff(&peft.base().forward(&x, false)?)?;
    println!("{} adapters (scale {}):", peft.adapters().len(), peft.config().scale());
    println!("  adapted output moved {moved:.4} away from the base");
    println!("  max |adapted - merged| = {gap:.2e}");
    Ok(())
}
