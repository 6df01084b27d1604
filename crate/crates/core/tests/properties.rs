use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use convnext_lora::data::image::{hflip, resize_bilinear};
use convnext_lora::data::{split, AugmentConfig, DatasetManifest, Sample, Split};
use convnext_lora::lora::{adapted_linear, init_adapter, merge, unmerge};
use convnext_lora::metrics::{accuracy, confusion, mcc_multiclass, prf1, Averaging};
use convnext_lora::optim::{AdamW, AdamWConfig};
use convnext_lora::persist::{decode_checkpoint, write_checkpoint, CheckpointKind};
use convnext_lora::backbone::ModelConfig;
use convnext_lora::tensor::NdArray;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn labelled(max_k: usize) -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
    (2..=max_k).prop_flat_map(|k| {
        prop::collection::vec((0..k, 0..k), 1..120).prop_map(move |pairs| {
            let (p, l) = pairs.into_iter().unzip();
            (k, p, l)
        })
    })
}

fn manifest(counts: &[usize], group_size: usize) -> DatasetManifest {
    let mut samples = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            samples.push(Sample {
                path: PathBuf::from(format!("c{c}/{i}.ppm")),
                class_id: c,
                group: (group_size > 0).then(|| format!("c{c}-g{}", i / group_size)),
                split: None,
            });
        }
    }
    DatasetManifest {
        class_names: (0..counts.len()).map(|c| format!("c{c}")).collect(),
        samples,
    }
}

proptest! {
    #[test]
    fn metrics_ignore_sample_order((k, preds, labels) in labelled(12), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..preds.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let p2: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
        let l2: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let a = confusion(&preds, &labels, k).unwrap();
        let b = confusion(&p2, &l2, k).unwrap();
        prop_assert_eq!(&a, &b);
        for avg in Averaging::ALL {
            prop_assert_eq!(prf1(&a, avg), prf1(&b, avg));
        }
    }

    #[test]
    fn relabeling_classes_keeps_scores((k, preds, labels) in labelled(10), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = confusion(&preds, &labels, k).unwrap();
        let b = confusion(
            &preds.iter().map(|&p| perm[p]).collect::<Vec<_>>(),
            &labels.iter().map(|&l| perm[l]).collect::<Vec<_>>(),
            k,
        ).unwrap();
        prop_assert_eq!(accuracy(&a).unwrap(), accuracy(&b).unwrap());
        prop_assert!((mcc_multiclass(&a) - mcc_multiclass(&b)).abs() < 1e-12);
        for avg in [Averaging::Macro, Averaging::Weighted] {
            let (x, y) = (prf1(&a, avg), prf1(&b, avg));
            prop_assert!((x.0 - y.0).abs() < 1e-12 && (x.1 - y.1).abs() < 1e-12 && (x.2 - y.2).abs() < 1e-12);
        }
    }

    #[test]
    fn micro_and_weighted_identities((k, preds, labels) in labelled(20)) {
        let cm = confusion(&preds, &labels, k).unwrap();
        let acc = accuracy(&cm).unwrap();
        prop_assert_eq!(prf1(&cm, Averaging::Micro), (acc, acc, acc));
        prop_assert_eq!(prf1(&cm, Averaging::Weighted).1, acc);
        let mcc = mcc_multiclass(&cm);
        prop_assert!((-1.0..=1.0).contains(&mcc));
    }

    #[test]
    fn stratified_split_sizes(counts in prop::collection::vec(3usize..60, 1..6), seed in any::<u64>()) {
        let ratios = [0.8, 0.1, 0.1];
        let out = split(&manifest(&counts, 0), ratios, seed, false).unwrap();
        for (c, &n) in counts.iter().enumerate() {
            for (i, s) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
                let got = out.samples.iter().filter(|x| x.class_id == c && x.split == Some(s)).count();
                let want = ratios[i] * n as f64;
                prop_assert!((got as f64 - want).abs() <= 1.0, "class {c} {s}: {got} vs {want}");
            }
        }
        prop_assert_eq!(split(&manifest(&counts, 0), ratios, seed, false).unwrap(), out);
    }

    #[test]
    fn group_split_never_leaks(counts in prop::collection::vec(1usize..40, 1..5), group in 1usize..7, seed in any::<u64>()) {
        let out = split(&manifest(&counts, group), [0.6, 0.2, 0.2], seed, true).unwrap();
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for s in &out.samples {
            let sp = s.split.unwrap();
            let g = s.group.as_deref().unwrap();
            prop_assert_eq!(*seen.entry(g).or_insert(sp), sp);
        }
        let labels: HashSet<_> = out.samples.iter().map(|s| (s.path.clone(), s.class_id)).collect();
        prop_assert_eq!(labels.len(), out.samples.len());
    }

    #[test]
    fn hflip_is_an_involution(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img: Vec<f32> = (0..3 * h * w).map(|_| rng.random()).collect();
        let mut twice = img.clone();
        hflip(&mut twice, 3, h, w);
        hflip(&mut twice, 3, h, w);
        prop_assert_eq!(twice, img);
    }

    #[test]
    fn same_size_resize_is_identity(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img: Vec<f32> = (0..2 * h * w).map(|_| rng.random()).collect();
        let out = resize_bilinear(&img, 2, h, w, h, w);
        prop_assert!(out.iter().zip(&img).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn normalization_round_trip(pixels in prop::collection::vec(0f32..=255.0, 3..60)) {
        let n = pixels.len() / 3 * 3;
        let mut buf = pixels[..n].to_vec();
        let cfg = AugmentConfig::none(32);
        cfg.normalize(&mut buf);
        cfg.denormalize(&mut buf);
        for (a, b) in buf.iter().zip(&pixels[..n]) {
            // compared on the [0, 1] intensity scale
            prop_assert!((a - b).abs() / 255.0 <= 1e-6);
        }
    }

    #[test]
    fn merge_then_unmerge_restores_weights(d in 1usize..12, k in 1usize..12, r in 1usize..4, seed in any::<u64>()) {
        prop_assume!(r <= d.min(k));
        let mut ad = init_adapter::<f64>(d, k, r, 2.0 * r as f64, 0.0, seed).unwrap();
        ad.b = NdArray::from_fn([d, r], |i| (i as f64 * 0.37).sin());
        let w = NdArray::from_fn([d, k], |i| (i as f64 * 0.11).cos());
        let back = unmerge(&merge(&w, &ad).unwrap(), &ad).unwrap();
        prop_assert!(back.max_abs_diff(&w).unwrap() < 1e-12);
    }

    #[test]
    fn adapter_path_is_linear_in_alpha_and_b(seed in any::<u64>(), c in 0.25f64..4.0) {
        let (d, k, r) = (5, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = NdArray::from_fn([3, k], |i| (i as f64 * 0.7 + seed as f64 % 5.0).sin());
        let w = NdArray::zeros([d, k]);
        let bias = NdArray::zeros([d]);
        let mut ad = init_adapter::<f64>(d, k, r, 4.0, 0.0, seed).unwrap();
        ad.b = NdArray::from_fn([d, r], |i| (i as f64).cos());
        let base = adapted_linear(&x, &w, &bias, &ad, false, &mut rng).unwrap();
        let mut scaled_alpha = ad.clone();
        scaled_alpha.alpha *= c;
        let mut scaled_b = ad.clone();
        scaled_b.b = ad.b.map(|v| v * c);
        let want = base.map(|v| v * c);
        for other in [scaled_alpha, scaled_b] {
            let got = adapted_linear(&x, &w, &bias, &other, false, &mut rng).unwrap();
            prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trips_any_tensors(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..200)) {
        let n = values.len();
        let t = NdArray::new([n], values).unwrap();
        let cfg = ModelConfig::toy(2);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, CheckpointKind::Base, &cfg, None, &["a".into(), "b".into()], &[("t".into(), &t)]).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        let got = &back.tensors["t"];
        prop_assert!(got.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn vectors_are_not_decayed(wd in 0.01f64..0.5, p in -3f32..3.0) {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: wd, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut store: HashMap<String, NdArray<f32>> = HashMap::new();
        store.insert("v".into(), NdArray::full([3], p));
        store.insert("m".into(), NdArray::full([2, 2], p));
        let grads = vec![("v".to_string(), NdArray::zeros([3])), ("m".to_string(), NdArray::zeros([2, 2]))];
        opt.apply(&mut store, &grads).unwrap();
        prop_assert!(store["v"].data().iter().all(|&v| v == p));
        let shrunk = (f64::from(p) * (1.0 - 0.1 * wd)) as f32;
        prop_assert!(store["m"].data().iter().all(|&v| (v - shrunk).abs() <= 1e-6));
    }
}
