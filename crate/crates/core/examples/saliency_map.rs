//! Trains a toy model briefly and writes an input-gradient saliency map for
//! one test image as a PGM file.
//!
//! cargo run --release --example saliency_map -- [out.pgm]

use std::path::PathBuf;

use convnext_lora::backbone::{Model, ModelConfig};
use convnext_lora::cli::saliency_pixels;
use convnext_lora::data::image::write_pgm;
use convnext_lora::data::{scan_dataset, split, synth_domain, AugmentConfig, Loader, Split, SynthSpec};
use convnext_lora::train::{train, Classifier, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("saliency.pgm"));
    let dir = tempfile::tempdir()?;
    let spec = SynthSpec::new(4, 40, 0.0, 3);
    synth_domain(&spec, dir.path())?;
    let manifest = split(&scan_dataset(dir.path())?, [0.8, 0.1, 0.1], 0, false)?;
    let mut loader = Loader::new(manifest, AugmentConfig::none(32))?.cached();

    let mut model = Model::<f32>::build(&ModelConfig::toy(4), 0)?;
    let cfg = TrainConfig { lr: 2e-3, max_epochs: 8, ..TrainConfig::default() };
    train(&mut model, &mut loader, &cfg)?;

    let idx = loader.manifest().indices(Split::Test)[0];
    let image = loader.load_sample(idx, false, 0, 0)?;
    let x = convnext_lora::tensor::NdArray::new([3, 32, 32], image)?;
    let class = model.logits(&x.clone().reshape([1, 3, 32, 32])?)?.argmax_rows()[0];
    let map = model.saliency(&x, class)?;
    write_pgm(&out, 128, 128, &saliency_pixels(map.data(), 32, 32, 128, 128))?;
    let sample = &loader.manifest().samples[idx];
    println!(
        "{} (true {}, predicted {}) -> {}",
        sample.path.display(),
        loader.manifest().class_names[sample.class_id],
        loader.manifest().class_names[class],
        out.display()
    );
    Ok(())
}
