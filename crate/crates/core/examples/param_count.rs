//! Parameter budget of the presets with and without rank-16 adapters.
//!
//! cargo run --release --example param_count

use convnext_lora::backbone::ModelConfig;
use convnext_lora::cli::params_table;
use convnext_lora::lora::LoraConfig;

fn main() {
    let lora = LoraConfig::default();
    for (name, classes) in [("base", 11), ("base", 23), ("tiny", 11)] {
        let cfg = ModelConfig::preset(name, classes).expect("known preset");
        println!("== {name}, {classes} classes, full fine-tuning");
        print!("{}", params_table(&cfg, None));
        println!("== {name}, {classes} classes, LoRA r={} on fc1/fc2", lora.rank);
        print!("{}", params_table(&cfg, Some(&lora)));
        println!();
    }
}
