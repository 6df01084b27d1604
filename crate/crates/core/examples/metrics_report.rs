//! Scores a fixed set of predictions with every averaging mode.
//!
//! cargo run --release --example metrics_report

use convnext_lora::metrics::{Averaging, MetricsReport};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let names: Vec<String> = ["polyp", "ulcer", "normal"].map(String::from).to_vec();
    let labels = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2];
    let preds = [0, 0, 1, 0, 1, 1, 1, 2, 2, 2, 0, 2, 2, 0];
    for avg in Averaging::ALL {
        let report = MetricsReport::compute(&preds, &labels, names.len(), avg)?;
        println!("--- {avg}\n{report}\n");
    }
    let report = MetricsReport::compute(&preds, &labels, names.len(), Averaging::Weighted)?;
    print!("{}", report.to_tsv(&names));
    Ok(())
}
