//! Trains one toy model per synthetic source and scores both on both test
//! splits. The off-diagonal entries show the cost of the source shift.
//!
//! cargo run --release --example cross_domain

use convnext_lora::experiment::ShiftExperiment;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let exp = ShiftExperiment::default();
    let dir = tempfile::tempdir()?;
    let mut domains = exp.synthesize(dir.path())?;
    let matrix = exp.cross_domain(&mut domains, 0)?;
    println!("{matrix}");
    Ok(())
}
