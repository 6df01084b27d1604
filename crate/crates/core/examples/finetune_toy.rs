//! Pretrains a toy ConvNeXtV2 on synthetic source A, then adapts it to the
//! shifted source B with LoRA and, for comparison, with the head alone.
//!
//! cargo run --release --example finetune_toy [-- <data_seed> <seeds> <patience>]

use convnext_lora::experiment::{median, ShiftExperiment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let mut exp = ShiftExperiment::default();
    if let Some(s) = args.next() {
        exp.data_seed = s.parse()?;
    }
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    if let Some(p) = args.next() {
        exp.finetune.patience = p.parse()?;
    }

    let dir = tempfile::tempdir()?;
    let mut domains = exp.synthesize(dir.path())?;
    let (base, history) = exp.pretrain(&mut domains.a, 0)?;
    println!(
        "pretrained on A: best val accuracy {:.1}% at epoch {}",
        100.0 * history.best().map_or(0.0, |r| r.val_accuracy),
        history.best_epoch
    );

    let (mut lora, mut head) = (Vec::new(), Vec::new());
    for seed in 0..seeds {
        let (_, l) = exp.finetune_lora(&base, &mut domains.b, seed)?;
        let (_, h) = exp.finetune_head(&base, &mut domains.b, seed)?;
        println!(
            "seed {seed}: lora {:.1}% ({} trainable, {:.0}s)  head-only {:.1}% ({} trainable, {:.0}s)",
            100.0 * l.test_accuracy,
            l.trainable_params,
            l.seconds,
            100.0 * h.test_accuracy,
            h.trainable_params,
            h.seconds
        );
        lora.push(l.test_accuracy);
        head.push(h.test_accuracy);
    }
    println!(
        "median B-test accuracy: lora {:.1}%  head-only {:.1}%",
        100.0 * median(&lora),
        100.0 * median(&head)
    );
    Ok(())
}
