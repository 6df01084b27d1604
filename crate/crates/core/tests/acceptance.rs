//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance` runs everything; pass criterion
//! numbers (`-- 2 3`) to run a subset.

use std::collections::HashMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use convnext_lora::autograd::{grad_check, grad_check_sampled, Graph, Var};
use convnext_lora::backbone::{is_head, Binding, LinearHook, Model, ModelConfig, ModelError};
use convnext_lora::data::{scan_dataset, split, synth_domain, AugmentConfig, Loader, Split, SynthSpec};
use convnext_lora::experiment::{median, ShiftExperiment};
use convnext_lora::lora::{adapter_layout, count_params_meta, inject, lora_linear_graph, LoraConfig, PeftModel};
use convnext_lora::metrics::{confusion, mcc_multiclass, prf1, Averaging, MetricsReport};
use convnext_lora::optim::AdamW;
use convnext_lora::persist::{self, decode_checkpoint, write_adapter, write_model, PersistError};
use convnext_lora::tensor::{NdArray, Scalar};
use convnext_lora::train::{train_step, train_with, Classifier, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn randn<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> NdArray<T> {
    NdArray::from_fn(shape.to_vec(), |_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
}

/// Replaces every parameter with random values so no term is trivially zero.
fn randomize<T: Scalar>(model: &mut Model<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params().keys().cloned().collect();
    for name in names {
        let p = model.param_mut(&name).unwrap();
        let shape = p.shape().to_vec();
        *p = if name.ends_with("norm.weight") {
            NdArray::from_fn(shape, |_| T::of(1.0 + 0.2 * rng.random_range(-1.0..1.0)))
        } else {
            randn(&mut rng, &shape, 0.2)
        };
    }
}

fn randomize_adapters<T: Scalar>(peft: &mut PeftModel<T>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ad in peft.adapters_mut().values_mut() {
        ad.a = randn(&mut rng, &ad.a.shape().to_vec(), std);
        ad.b = randn(&mut rng, &ad.b.shape().to_vec(), std);
    }
}

fn toy(num_classes: usize) -> ModelConfig {
    ModelConfig::toy(num_classes)
}

fn small_loader(dir: &std::path::Path, classes: usize, per_class: usize, ratios: [f64; 3]) -> Loader {
    let spec = SynthSpec::new(classes, per_class, 0.3, 5);
    synth_domain(&spec, dir).unwrap();
    let manifest = split(&scan_dataset(dir).unwrap(), ratios, 0, false).unwrap();
    Loader::new(manifest, AugmentConfig::none(32)).unwrap().cached()
}

// ---------------------------------------------------------------- criterion 1

type GraphFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> convnext_lora::tensor::Result<Var>>;

fn bx<F>(f: F) -> GraphFn
where
    F: Fn(&mut Graph<f64>, &[Var]) -> convnext_lora::tensor::Result<Var> + 'static,
{
    Box::new(f)
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, GraphFn, Vec<NdArray<f64>>)> {
    let mut r = |shape: &[usize]| randn::<f64>(rng, shape, 1.0);
    let s = 0.7;
    let perm = [2, 0, 1];
    let labels = vec![3, 0, 4, 1];
    let mask = NdArray::from_f64([3, 6], &[1., 0., 1., 1., 0., 1., 1., 1., 0., 1., 1., 1., 0., 1., 1., 1., 1., 0.]).unwrap();
    let konst = r(&[2, 3]);
    vec![
        ("add", bx(|g, v| g.add(v[0], v[1])), vec![r(&[2, 3]), r(&[2, 3])]),
        ("scale", bx(move |g, v| g.scale(v[0], s)), vec![r(&[2, 3])]),
        ("mul_const", bx(move |g, v| g.mul_const(v[0], konst.clone())), vec![r(&[2, 3])]),
        ("sum", bx(|g, v| g.sum(v[0])), vec![r(&[2, 3])]),
        ("permute", bx(move |g, v| g.permute(v[0], &perm)), vec![r(&[2, 3, 4])]),
        ("linear", bx(|g, v| g.linear(v[0], v[1], Some(v[2]))), vec![r(&[3, 4]), r(&[5, 4]), r(&[5])]),
        (
            "conv2d stride 2",
            bx(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 0)),
            vec![r(&[2, 3, 6, 6]), r(&[4, 3, 2, 2]), r(&[4])],
        ),
        (
            "conv2d padded",
            bx(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
            vec![r(&[1, 2, 4, 4]), r(&[3, 2, 3, 3]), r(&[3])],
        ),
        (
            "depthwise_conv2d",
            bx(|g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2]), 3)),
            vec![r(&[2, 2, 5, 5]), r(&[2, 1, 7, 7]), r(&[2])],
        ),
        (
            "layer_norm",
            bx(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)),
            vec![r(&[3, 5]), r(&[5]), r(&[5])],
        ),
        ("gelu", bx(|g, v| g.gelu(v[0])), vec![r(&[2, 5])]),
        (
            "grn",
            bx(|g, v| g.grn(v[0], v[1], v[2], 1e-6)),
            vec![r(&[2, 3, 3, 4]), r(&[4]), r(&[4])],
        ),
        ("global_avg_pool", bx(|g, v| g.global_avg_pool(v[0])), vec![r(&[2, 3, 3, 2])]),
        (
            "softmax_cross_entropy",
            bx(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
            vec![r(&[4, 5])],
        ),
        ("pick", bx(|g, v| g.pick(v[0], 1, 2)), vec![r(&[3, 4])]),
        (
            "lora_linear",
            bx(move |g, v| {
                lora_linear_graph(g, v[0], v[1], Some(v[2]), v[3], v[4], 2.0, Some(mask.clone()))
                    .map_err(|e| convnext_lora::tensor::TensorError::Invalid { op: "lora", detail: e.to_string() })
            }),
            vec![r(&[3, 6]), r(&[4, 6]), r(&[4]), r(&[2, 6]), r(&[4, 2])],
        ),
    ]
}

/// Routes `fc1`/`fc2` through adapters whose factors are check inputs.
struct CheckedLora {
    vars: HashMap<String, (Var, Var)>,
}

impl LinearHook<f64> for CheckedLora {
    fn linear(&mut self, g: &mut Graph<f64>, layer: &str, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
        match self.vars.get(layer) {
            Some(&(a, bm)) => lora_linear_graph(g, x, w, Some(b), a, bm, 2.0, None)
                .map_err(|e| ModelError::InvalidConfig(e.to_string())),
            None => Ok(g.linear(x, w, Some(b))?),
        }
    }
}

fn end_to_end_check(seed: u64) -> Result<f64, String> {
    let cfg = toy(3);
    let mut model = ok(Model::<f64>::build(&cfg, seed))?;
    randomize(&mut model, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let names: Vec<String> = model.params().keys().cloned().collect();
    let layers: Vec<String> = cfg.projection_layers().into_iter().map(|(n, _, _)| n).collect();
    let mut inputs = vec![randn::<f64>(&mut rng, &[2, 3, 32, 32], 1.0)];
    inputs.extend(names.iter().map(|n| model.param(n).unwrap().clone()));
    for (_, d, k) in cfg.projection_layers() {
        inputs.push(randn(&mut rng, &[2, k], 0.3));
        inputs.push(randn(&mut rng, &[d, 2], 0.3));
    }
    let labels = vec![0, 2];
    let model = &model;
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let binding: Binding = names.iter().cloned().zip(v[1..=names.len()].iter().copied()).collect();
        let rest = &v[1 + names.len()..];
        let mut hook = CheckedLora {
            vars: layers.iter().enumerate().map(|(i, l)| (l.clone(), (rest[2 * i], rest[2 * i + 1]))).collect(),
        };
        let logits = model
            .forward_graph(g, &binding, v[0], &mut hook)
            .map_err(|e| convnext_lora::tensor::TensorError::Invalid { op: "model", detail: e.to_string() })?;
        g.softmax_cross_entropy(logits, &labels)
    };
    let report = ok(grad_check_sampled(f, &inputs, 1e-5, 3, seed))?;
    Ok(report.max_rel_error)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let (mut prim_worst, mut prim_name, mut e2e_worst) = (0.0f64, "", 0.0f64);
    let mut cases = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, f, inputs) in primitive_cases(&mut rng) {
            let report = ok(grad_check(f, &inputs, 1e-5))?;
            cases += 1;
            if report.max_rel_error > prim_worst {
                prim_worst = report.max_rel_error;
                prim_name = name;
            }
        }
        e2e_worst = e2e_worst.max(end_to_end_check(seed)?);
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{cases} primitive checks, worst rel err {prim_worst:.2e} ({prim_name}); toy model + adapters over 20 seeds, worst {e2e_worst:.2e}"
    );
    ensure!(prim_worst < 1e-5, "{detail}");
    ensure!(e2e_worst < 1e-4, "{detail}");
    ensure!(secs < 120.0, "{detail}: over 2 min");
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 2

fn zero_init_gap<T: Scalar>(seed: u64) -> Result<f64, String> {
    let mut base = ok(Model::<T>::build(&toy(5), seed))?;
    randomize(&mut base, seed);
    let peft = ok(inject(base, &LoraConfig::new(4, 8.0, 0.1), seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        // 10 batches of 10 inputs
        let x = randn::<T>(&mut rng, &[10, 3, 32, 32], 1.0);
        let a = ok(peft.predict(&x))?;
        let b = ok(peft.base().forward(&x, false))?;
        worst = worst.max(ok(a.max_abs_diff(&b))?);
    }
    Ok(worst)
}

fn criterion_2() -> Check {
    let d64 = zero_init_gap::<f64>(1)?;
    let d32 = zero_init_gap::<f32>(2)?;
    let detail = format!("100 inputs: f64 max gap {d64:e}, f32 max gap {d32:e}");
    ensure!(d64 == 0.0, "{detail}");
    ensure!(d32 <= 1e-6, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Check {
    let mut worst = 0.0f64;
    let mut layers = 0;
    for seed in 0..5 {
        let cfg = toy(6);
        let mut base = ok(Model::<f32>::build(&cfg, seed))?;
        randomize(&mut base, seed);
        let mut peft = ok(inject(base, &LoraConfig::new(4, 8.0, 0.1), seed))?;
        randomize_adapters(&mut peft, seed + 50, 0.1);
        layers = peft.adapters().len();
        let expected = 2 * cfg.depths.iter().sum::<usize>();
        ensure!(layers == expected, "{layers} adapters, expected {expected}");
        let merged = ok(peft.merged())?;
        let x = randn::<f32>(&mut ChaCha8Rng::seed_from_u64(seed), &[8, 3, 32, 32], 1.0);
        let a = ok(peft.predict(&x))?;
        let b = ok(merged.forward(&x, false))?;
        worst = worst.max(ok(a.max_abs_diff(&b))?);
    }
    let detail = format!("5 random adapter sets on all {layers} projections: max |adapted - merged| {worst:.2e}");
    ensure!(worst <= 1e-5, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Check {
    let start = Instant::now();
    let base = ModelConfig::base(1000);
    let lora = LoraConfig::new(16, 32.0, 0.1);
    // closed form: every block has fc1 [4c, c] and fc2 [c, 4c], each adding r·(d + k)
    let closed: usize = base
        .depths
        .iter()
        .zip(&base.dims)
        .map(|(&n, &c)| n * 2 * lora.rank * (4 * c + c))
        .sum();
    let walk: usize = adapter_layout(&base, &lora).iter().map(|p| p.numel()).sum();
    let meta = count_params_meta(&base, Some(&lora));
    let plain = count_params_meta(&base, None);
    let adapters = meta.total - plain.total;

    // the walk over a materialized model must agree with metadata
    let toy_cfg = toy(7);
    let toy_peft = ok(inject(ok(Model::<f32>::build(&toy_cfg, 0))?, &LoraConfig::new(2, 4.0, 0.0), 0))?;
    let toy_walk: usize = toy_peft.adapters().values().map(|a| a.a.len() + a.b.len()).sum();
    let toy_meta = count_params_meta(&toy_cfg, Some(&LoraConfig::new(2, 4.0, 0.0)));
    let toy_plain = count_params_meta(&toy_cfg, None);

    let rel = (plain.total as f64 - 89e6).abs() / 89e6;
    let detail = format!(
        "adapters closed-form {closed}, walk {walk}, meta {adapters}; base total {} ({:.2}% from 89M); {:.2}s",
        plain.total,
        100.0 * rel,
        start.elapsed().as_secs_f64()
    );
    ensure!(closed == 2_887_680 && walk == 2_887_680 && adapters == 2_887_680, "{detail}");
    ensure!(rel <= 0.02, "{detail}");
    ensure!(
        toy_walk == toy_meta.total - toy_plain.total && toy_peft.count_params() == toy_meta,
        "toy walk {toy_walk} disagrees with metadata {toy_meta:?}"
    );
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Check {
    let dir = ok(tempfile::tempdir())?;
    let mut loader = small_loader(dir.path(), 4, 16, [0.75, 0.125, 0.125]);
    let mut base = ok(Model::<f32>::build(&toy(4), 3))?;
    randomize(&mut base, 3);
    let before = base.clone();
    let mut peft = ok(inject(base, &LoraConfig::new(4, 8.0, 0.1), 3))?;
    let adapters_before = peft.adapters().clone();
    let mut opt = ok(AdamW::new(TrainConfig { lr: 1e-3, ..TrainConfig::default() }.adamw()))?;
    let train_idx = loader.manifest().indices(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for step in 0..50u64 {
        let batch: Vec<usize> = (0..8).map(|_| train_idx[rng.random_range(0..train_idx.len())]).collect();
        let (x, y) = ok(loader.load_batch(Split::Train, &batch, true, 0, step))?;
        ok(train_step(&mut peft, &mut opt, x, &y, &mut rng))?;
    }
    let mut frozen = 0;
    for (name, p) in before.params() {
        let now = peft.base().param(name).unwrap();
        let same = now.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if is_head(name) {
            ensure!(!same, "head tensor {name} never changed");
        } else {
            ensure!(same, "frozen tensor {name} changed");
            frozen += 1;
        }
    }
    for (layer, ad) in peft.adapters() {
        let old = &adapters_before[layer];
        ensure!(ad.a != old.a && ad.b != old.b, "adapter {layer} did not train");
    }
    Ok(format!(
        "50 steps: {frozen} frozen tensors bitwise unchanged; all {} A/B pairs and the head updated",
        peft.adapters().len()
    ))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Check {
    let start = Instant::now();
    let exp = ShiftExperiment::default();
    let dir = ok(tempfile::tempdir())?;
    let mut domains = ok(exp.synthesize(dir.path()))?;
    let (base, _) = ok(exp.pretrain(&mut domains.a, 0))?;
    let (mut lora, mut head) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        lora.push(ok(exp.finetune_lora(&base, &mut domains.b, seed))?.1.test_accuracy);
        head.push(ok(exp.finetune_head(&base, &mut domains.b, seed))?.1.test_accuracy);
    }
    let (l, h) = (100.0 * median(&lora), 100.0 * median(&head));
    let secs = start.elapsed().as_secs_f64();
    let pct = |v: &[f64]| v.iter().map(|a| format!("{:.1}", 100.0 * a)).collect::<Vec<_>>().join("/");
    let detail = format!(
        "B-test median: LoRA r=4 {l:.1}% [{}], head-only {h:.1}% [{}], margin {:.1} points; {secs:.0}s",
        pct(&lora),
        pct(&head),
        l - h
    );
    ensure!(l >= 90.0, "{detail}");
    ensure!(l - h >= 5.0, "{detail}");
    ensure!(secs < 900.0, "{detail}: over 15 min");
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Check {
    let start = Instant::now();
    let exp = ShiftExperiment::default();
    let dir = ok(tempfile::tempdir())?;
    let mut domains = ok(exp.synthesize(dir.path()))?;
    let m = ok(exp.cross_domain(&mut domains, 0))?;
    let secs = start.elapsed().as_secs_f64();
    let acc = &m.accuracy;
    let gap = (0..2)
        .map(|i| 100.0 * (acc[i][i] - acc[i][1 - i]))
        .fold(f64::INFINITY, f64::min);
    let detail = format!(
        "A→A {:.1}%, A→B {:.1}%, B→A {:.1}%, B→B {:.1}%; smallest diagonal margin {gap:.1} points; {secs:.0}s",
        100.0 * acc[0][0],
        100.0 * acc[0][1],
        100.0 * acc[1][0],
        100.0 * acc[1][1]
    );
    ensure!(gap >= 20.0, "{detail}");
    ensure!(secs < 1200.0, "{detail}: over 20 min");
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 8

struct Oracle {
    accuracy: f64,
    precision: [f64; 3],
    recall: [f64; 3],
    f1: [f64; 3],
    mcc: f64,
}

/// Straight from the definitions, one sample at a time.
fn oracle(preds: &[usize], labels: &[usize], k: usize) -> Oracle {
    let n = labels.len();
    let mut p = vec![0.0; k];
    let mut r = vec![0.0; k];
    let mut f = vec![0.0; k];
    let mut support = vec![0.0; k];
    let mut micro = (0usize, 0usize, 0usize);
    for c in 0..k {
        let tp = (0..n).filter(|&i| preds[i] == c && labels[i] == c).count();
        let fp = (0..n).filter(|&i| preds[i] == c && labels[i] != c).count();
        let fn_ = (0..n).filter(|&i| preds[i] != c && labels[i] == c).count();
        micro = (micro.0 + tp, micro.1 + fp, micro.2 + fn_);
        p[c] = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        r[c] = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        f[c] = if p[c] + r[c] == 0.0 { 0.0 } else { 2.0 * p[c] * r[c] / (p[c] + r[c]) };
        support[c] = (tp + fn_) as f64;
    }
    let mp = micro.0 as f64 / (micro.0 + micro.1) as f64;
    let mr = micro.0 as f64 / (micro.0 + micro.2) as f64;
    let mf = if mp + mr == 0.0 { 0.0 } else { 2.0 * mp * mr / (mp + mr) };
    let macro_ = |v: &[f64]| v.iter().sum::<f64>() / k as f64;
    let weighted = |v: &[f64]| v.iter().zip(&support).map(|(a, s)| a * s).sum::<f64>() / n as f64;

    // multiclass MCC as the correlation of one-hot indicator matrices
    let onehot = |v: &[usize]| -> Vec<Vec<f64>> {
        v.iter().map(|&c| (0..k).map(|j| (j == c) as u8 as f64).collect()).collect()
    };
    let (x, y) = (onehot(labels), onehot(preds));
    let mean = |m: &Vec<Vec<f64>>| -> Vec<f64> { (0..k).map(|j| m.iter().map(|row| row[j]).sum::<f64>() / n as f64).collect() };
    let (mx, my) = (mean(&x), mean(&y));
    let cov = |a: &Vec<Vec<f64>>, ma: &Vec<f64>, b: &Vec<Vec<f64>>, mb: &Vec<f64>| -> f64 {
        (0..n).map(|i| (0..k).map(|j| (a[i][j] - ma[j]) * (b[i][j] - mb[j])).sum::<f64>()).sum()
    };
    let (cxy, cxx, cyy) = (cov(&x, &mx, &y, &my), cov(&x, &mx, &x, &mx), cov(&y, &my, &y, &my));
    let mcc = if cxx * cyy <= 0.0 { 0.0 } else { cxy / (cxx * cyy).sqrt() };
    Oracle {
        accuracy: (0..n).filter(|&i| preds[i] == labels[i]).count() as f64 / n as f64,
        precision: [mp, macro_(&p), weighted(&p)],
        recall: [mr, macro_(&r), weighted(&r)],
        f1: [mf, macro_(&f), weighted(&f)],
        mcc,
    }
}

/// Two-class MCC straight from the 2×2 counts, class 1 positive.
fn binary_mcc(preds: &[usize], labels: &[usize]) -> f64 {
    let count = |p: usize, t: usize| preds.iter().zip(labels).filter(|&(&a, &b)| a == p && b == t).count() as f64;
    let (tp, tn, fp, fn_) = (count(1, 1), count(0, 0), count(1, 0), count(0, 1));
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den
    }
}

fn criterion_8() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_float = 0.0f64;
    let mut worst_binary = 0.0f64;
    for set in 0..1000 {
        let k = [2, 11, 20][set % 3];
        let n = rng.random_range(1..300);
        // skewed draws so some classes are absent and some always right
        let skill: f64 = rng.random();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k).min(rng.random_range(0..k))).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&y| if rng.random::<f64>() < skill { y } else { rng.random_range(0..k) })
            .collect();
        let o = oracle(&preds, &labels, k);
        let cm = ok(confusion(&preds, &labels, k))?;
        for (i, avg) in Averaging::ALL.iter().enumerate() {
            let report = ok(MetricsReport::from_confusion(cm.clone(), *avg))?;
            ensure!(report.accuracy == o.accuracy, "set {set}: accuracy {} vs {}", report.accuracy, o.accuracy);
            let (p, r, f) = prf1(&cm, *avg);
            for (name, got, want) in [("precision", p, o.precision[i]), ("recall", r, o.recall[i]), ("f1", f, o.f1[i])] {
                worst_float = worst_float.max((got - want).abs());
                ensure!((got - want).abs() <= 1e-12, "set {set} {avg} {name}: {got} vs {want}");
            }
            worst_float = worst_float.max((report.mcc - o.mcc).abs());
            ensure!((report.mcc - o.mcc).abs() <= 1e-12, "set {set}: mcc {} vs {}", report.mcc, o.mcc);
        }
        let (mp, mr, _) = prf1(&cm, Averaging::Micro);
        let (_, wr, _) = prf1(&cm, Averaging::Weighted);
        ensure!(mp == o.accuracy && mr == o.accuracy, "set {set}: micro P/R differ from accuracy");
        ensure!(wr == o.accuracy, "set {set}: weighted recall {wr} differs from accuracy");
        if k == 2 {
            let d = (mcc_multiclass(&cm) - binary_mcc(&preds, &labels)).abs();
            worst_binary = worst_binary.max(d);
            ensure!(d <= 1e-12, "set {set}: multiclass MCC departs from the binary formula by {d}");
        }
    }
    Ok(format!(
        "1000 sets, K in {{2, 11, 20}}: accuracy and micro/weighted identities exact; largest float gap {worst_float:.1e}; binary MCC gap {worst_binary:.1e}"
    ))
}

// ---------------------------------------------------------------- criterion 9

/// `(stopping epoch, best epoch)` by counting epochs since the last strict
/// improvement.
fn contract(seq: &[f64], patience: usize, max_epochs: usize) -> (usize, usize) {
    let (mut best, mut best_epoch) = (f64::NEG_INFINITY, 0);
    for e in 1..=max_epochs {
        if seq[e - 1] > best {
            best = seq[e - 1];
            best_epoch = e;
        } else if e - best_epoch >= patience {
            return (e, best_epoch);
        }
    }
    (max_epochs, best_epoch)
}

fn run_injected(loader: &mut Loader, seq: &[f64], patience: usize, max_epochs: usize, seed: u64) -> Result<(), String> {
    let mut model = ok(Model::<f32>::build(&toy(3), seed))?;
    let cfg = TrainConfig {
        lr: 3e-3,
        max_epochs,
        patience,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    };
    let val = loader.manifest().indices(Split::Val);
    let mut seen: Vec<NdArray<f32>> = Vec::new();
    let history = ok(train_with(&mut model, loader, &cfg, |m, l, epoch| {
        let (x, _) = l.load_batch(Split::Val, &val, false, 0, 0)?;
        seen.push(m.logits(&x)?);
        Ok((0.0, seq[epoch - 1]))
    }))?;
    let (stop, best) = contract(seq, patience, max_epochs);
    ensure!(
        history.epochs.len() == stop && history.best_epoch == best,
        "sequence {seq:?}: ran {} epochs with best {}, contract says {stop} and {best}",
        history.epochs.len(),
        history.best_epoch
    );
    ensure!(history.epochs.len() <= best + patience, "ran past best_epoch + patience");
    let (x, _) = ok(loader.load_batch(Split::Val, &val, false, 0, 0))?;
    let again = ok(model.logits(&x))?;
    let then = &seen[best - 1];
    ensure!(
        again.data().iter().zip(then.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "restored weights do not reproduce epoch {best}"
    );
    if stop > best {
        let last = seen.last().unwrap();
        ensure!(again != *last, "returned the last epoch's weights instead of the best");
    }
    Ok(())
}

fn criterion_9() -> Check {
    let dir = ok(tempfile::tempdir())?;
    let mut loader = small_loader(dir.path(), 3, 8, [0.5, 0.25, 0.25]);
    run_injected(&mut loader, &[0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.9, 0.9, 0.9], 5, 10, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..12u64 {
        let seq: Vec<f64> = (0..10).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
        run_injected(&mut loader, &seq, 1 + trial as usize % 4, 10, trial)?;
    }
    Ok("patience 5 on [.5,.6,.6,.6,.6,.6,.6,...] stops after epoch 7 with best epoch 2; 12 random sequences match the contract; restored weights reproduce best-epoch logits bitwise".into())
}

// --------------------------------------------------------------- criterion 10

struct CountingWriter(u64);

impl Write for CountingWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0 += buf.len() as u64;
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn bitwise_eq(a: &NdArray<f32>, b: &NdArray<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn criterion_10() -> Check {
    let names: Vec<String> = (0..5).map(|i| format!("class{i}")).collect();
    let mut model = ok(Model::<f32>::build(&toy(5), 4))?;
    randomize(&mut model, 4);
    let dir = ok(tempfile::tempdir())?;

    // full model: bytes → model → bytes
    let path = dir.path().join("model.ckpt");
    ok(persist::save_model(&model, &names, &path))?;
    let (back, back_names) = ok(persist::load_model(&path))?;
    ensure!(back_names == names, "class names changed");
    for (n, p) in model.params() {
        ensure!(bitwise_eq(&p.value, back.param(n).unwrap()), "tensor {n} changed");
    }
    let bytes = ok(std::fs::read(&path))?;
    let mut again = Vec::new();
    ok(write_model(&mut again, &back, &names))?;
    ensure!(again == bytes, "save → load → save changed the bytes");

    // adapters attach to the same base and reproduce the forward pass
    let mut peft = ok(inject(model.clone(), &LoraConfig::new(4, 8.0, 0.1), 4))?;
    randomize_adapters(&mut peft, 7, 0.1);
    let apath = dir.path().join("adapter.ckpt");
    ok(persist::save_adapter(&peft, &names, &apath))?;
    let (loaded, _) = ok(persist::load_adapter(&apath, back))?;
    ensure!(loaded == peft, "adapter round trip differs");
    let x = randn::<f32>(&mut ChaCha8Rng::seed_from_u64(1), &[4, 3, 32, 32], 1.0);
    ensure!(ok(loaded.predict(&x))? == ok(peft.predict(&x))?, "adapter forward parity broken");
    let tiny_base = ok(Model::<f32>::build(&ModelConfig::tiny(5), 0))?;
    ensure!(
        matches!(persist::load_adapter(&apath, tiny_base), Err(PersistError::Incompatible(_))),
        "adapter loaded onto an incompatible base"
    );

    // single-byte corruption anywhere in the payload, plus magic and length prefix
    let header_end = 16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut positions: Vec<usize> = (0..16).collect();
    positions.extend((0..1000).map(|_| rng.random_range(header_end..bytes.len())));
    positions.extend([header_end, bytes.len() - 1]);
    for &pos in &positions {
        let mut bad = bytes.clone();
        bad[pos] ^= 1 << rng.random_range(0..8);
        ensure!(decode_checkpoint(&bad).is_err(), "flipping byte {pos} went unnoticed");
    }
    let truncated = decode_checkpoint(&bytes[..bytes.len() - 3]);
    ensure!(matches!(truncated, Err(PersistError::Truncated { .. })), "truncation not reported");

    // storage ratio on the full-size configuration
    let classes: Vec<String> = (0..11).map(|i| format!("c{i}")).collect();
    let big = ok(Model::<f32>::build(&ModelConfig::base(11), 0))?;
    let mut w = CountingWriter(0);
    let base_size = ok(write_model(&mut w, &big, &classes))?;
    ensure!(w.0 == base_size, "reported size {base_size} but wrote {}", w.0);
    let big_peft = ok(inject(big, &LoraConfig::new(16, 32.0, 0.1), 0))?;
    let mut w = CountingWriter(0);
    let adapter_size = ok(write_adapter(&mut w, &big_peft, &classes))?;
    let ratio = adapter_size as f64 / base_size as f64;
    ensure!(ratio < 0.05, "adapter checkpoint is {:.2}% of the base", 100.0 * ratio);
    Ok(format!(
        "toy tensors bitwise equal after round trip; {} single-byte corruptions detected; Base r=16 adapter {:.1} MB vs base {:.1} MB ({:.2}%)",
        positions.len(),
        adapter_size as f64 / 1e6,
        base_size as f64 / 1e6,
        100.0 * ratio
    ))
}

// ---------------------------------------------------------------------- main

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 10] = [
        (1, "gradient correctness", criterion_1),
        (2, "LoRA zero-init equivalence", criterion_2),
        (3, "merge parity", criterion_3),
        (4, "parameter accounting", criterion_4),
        (5, "freeze discipline", criterion_5),
        (6, "toy fine-tuning efficacy", criterion_6),
        (7, "cross-domain pattern", criterion_7),
        (8, "metrics oracle", criterion_8),
        (9, "early stopping", criterion_9),
        (10, "persistence", criterion_10),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let took = fmt_duration(start.elapsed());
        match outcome {
            Ok(detail) => println!("PASS  [{id}] {name}: {detail} ({took})"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  [{id}] {name}: {detail} ({took})");
            }
        }
        std::io::stdout().flush().ok();
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}
