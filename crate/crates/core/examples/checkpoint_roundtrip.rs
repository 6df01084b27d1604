//! Saves a toy model and an adapter set, reloads both, and checks the
//! forward pass is unchanged.
//!
//! cargo run --release --example checkpoint_roundtrip

use convnext_lora::backbone::{Model, ModelConfig};
use convnext_lora::lora::{inject, LoraConfig};
use convnext_lora::persist::{load_adapter, load_model, read_header, save_adapter, save_model};
use convnext_lora::tensor::NdArray;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let classes: Vec<String> = (0..5).map(|i| format!("class{i}")).collect();
    let base = Model::<f32>::build(&ModelConfig::toy(5), 2)?;
    let mut peft = inject(base.clone(), &LoraConfig::new(4, 8.0, 0.1), 2)?;
    for ad in peft.adapters_mut().values_mut() {
        ad.b = ad.b.map(|_| 0.01);
    }

    let base_path = dir.path().join("model.ckpt");
    let adapter_path = dir.path().join("adapter.ckpt");
    let base_bytes = save_model(&base, &classes, &base_path)?;
    let adapter_bytes = save_adapter(&peft, &classes, &adapter_path)?;
    let header = read_header(&adapter_path)?;
    println!("base checkpoint    {base_bytes} bytes");
    println!(
        "adapter checkpoint {adapter_bytes} bytes, {} tensors, sha256 {}",
        header.tensors.len(),
        &header.checksum[..16]
    );

    let (base2, _) = load_model(&base_path)?;
    let (peft2, names) = load_adapter(&adapter_path, base2)?;
    let x = NdArray::from_fn([2, 3, 32, 32], |i| (i as f32 * 0.01).cos());
    let same = peft.predict(&x)? == peft2.predict(&x)?;
    println!("reloaded {} classes; identical logits: {same}", names.len());
    Ok(())
}
