//! Writes two synthetic sources of the same classes, one of them shifted in
//! palette and texture, then scans and splits them.
//!
//! cargo run --release --example synth_domains -- [out_dir]

use std::path::PathBuf;

use convnext_lora::data::{scan_dataset, split, synth_domain, Split, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("synth_domains"));
    for (name, shift, seed) in [("a", 0.0, 1), ("b", 0.8, 2)] {
        let root = out.join(name);
        let summary = synth_domain(&SynthSpec::new(6, 40, shift, seed), &root)?;
        let manifest = split(&scan_dataset(&root)?, [0.8, 0.1, 0.1], 0, true)?;
        println!(
            "source {name} (shift {shift}): {} images in {} classes -> train {} / val {} / test {}",
            summary.total(),
            summary.class_names.len(),
            manifest.indices(Split::Train).len(),
            manifest.indices(Split::Val).len(),
            manifest.indices(Split::Test).len()
        );
    }
    println!("images and groups.tsv written under {}", out.display());
    Ok(())
}
