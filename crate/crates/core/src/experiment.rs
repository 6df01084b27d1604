//! Desk-scale domain-shift experiment on synthetic data.
//!
//! Source A renders the shape classes with no shift; source B renders the
//! same classes with a palette and texture shift. A toy ConvNeXtV2 is
//! pretrained on A and then adapted to B, either with LoRA adapters plus a new
//! head or with the head alone.

use std::path::Path;

use crate::backbone::{Model, ModelConfig};
use crate::data::{scan_dataset, split, AugmentConfig, Loader, Split, SynthSpec};
use crate::lora::{inject, LoraConfig, PeftModel};
use crate::train::{cross_eval, predict, train, CrossEvalMatrix, NamedModel, Result, TrainConfig, TrainHistory};

/// Knobs of the experiment. The defaults are the settings the acceptance
/// suite runs with.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftExperiment {
    pub num_classes: usize,
    pub per_class: usize,
    /// shift of source B (A is unshifted)
    pub shift: f64,
    pub image_size: usize,
    pub data_seed: u64,
    pub ratios: [f64; 3],
    pub augment: AugmentConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub lora: LoraConfig,
}

impl Default for ShiftExperiment {
    fn default() -> Self {
        Self {
            num_classes: 8,
            per_class: 250,
            shift: 0.8,
            image_size: 32,
            data_seed: 10,
            ratios: [0.7, 0.15, 0.15],
            augment: AugmentConfig::none(32),
            pretrain: TrainConfig {
                lr: 2e-3,
                max_epochs: 20,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                lr: 5e-3,
                max_epochs: 30,
                ..TrainConfig::default()
            },
            lora: LoraConfig::new(4, 8.0, 0.0),
        }
    }
}

/// Loaders for both sources, split by group so near-duplicates stay together.
pub struct Domains {
    pub a: Loader,
    pub b: Loader,
    pub class_names: Vec<String>,
}

/// Test accuracy of one adapted model.
#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub test_accuracy: f64,
    pub history: TrainHistory,
    pub trainable_params: usize,
    pub seconds: f64,
}

impl ShiftExperiment {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            ..ModelConfig::toy(self.num_classes)
        }
    }

    pub fn source_spec(&self, shift: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            image_size: self.image_size,
            ..SynthSpec::new(self.num_classes, self.per_class, shift, seed)
        }
    }

    /// Writes both sources under `root/a` and `root/b` and returns cached loaders.
    pub fn synthesize(&self, root: &Path) -> Result<Domains> {
        let mut loaders = Vec::new();
        let mut names = Vec::new();
        for (dir, shift, seed) in [("a", 0.0, self.data_seed), ("b", self.shift, self.data_seed + 1)] {
            let path = root.join(dir);
            let summary = crate::data::synth_domain(&self.source_spec(shift, seed), &path)?;
            names = summary.class_names;
            let manifest = split(&scan_dataset(&path)?, self.ratios, self.data_seed, true)?;
            loaders.push(Loader::new(manifest, AugmentConfig { resize: self.image_size, ..self.augment.clone() })?.cached());
        }
        let b = loaders.pop().expect("two loaders");
        let a = loaders.pop().expect("two loaders");
        Ok(Domains { a, b, class_names: names })
    }

    /// Full training from scratch on one source.
    pub fn pretrain(&self, loader: &mut Loader, seed: u64) -> Result<(Model<f32>, TrainHistory)> {
        let mut model = Model::build(&self.model_config(), seed)?;
        let cfg = TrainConfig { seed, ..self.pretrain.clone() };
        let history = train(&mut model, loader, &cfg)?;
        Ok((model, history))
    }

    /// Fresh head plus LoRA adapters on a copy of `base`, trained on `loader`.
    pub fn finetune_lora(&self, base: &Model<f32>, loader: &mut Loader, seed: u64) -> Result<(PeftModel<f32>, FinetuneOutcome)> {
        let start = std::time::Instant::now();
        let mut model = base.clone();
        model.reset_head(self.num_classes, 100 + seed)?;
        let mut peft = inject(model, &self.lora, seed)?;
        let cfg = TrainConfig { seed, ..self.finetune.clone() };
        let history = train(&mut peft, loader, &cfg)?;
        let outcome = FinetuneOutcome {
            test_accuracy: predict(&peft, loader, Split::Test, 64)?.accuracy(),
            history,
            trainable_params: peft.count_params().trainable,
            seconds: start.elapsed().as_secs_f64(),
        };
        Ok((peft, outcome))
    }

    /// Frozen backbone with a fresh head, trained on `loader`.
    pub fn finetune_head(&self, base: &Model<f32>, loader: &mut Loader, seed: u64) -> Result<(Model<f32>, FinetuneOutcome)> {
        let start = std::time::Instant::now();
        let mut model = base.clone();
        model.reset_head(self.num_classes, 100 + seed)?;
        model.freeze_backbone();
        let cfg = TrainConfig { seed, ..self.finetune.clone() };
        let history = train(&mut model, loader, &cfg)?;
        let outcome = FinetuneOutcome {
            test_accuracy: predict(&model, loader, Split::Test, 64)?.accuracy(),
            history,
            trainable_params: model.count_params().trainable,
            seconds: start.elapsed().as_secs_f64(),
        };
        Ok((model, outcome))
    }

    /// Trains one model per source and scores each on both test splits.
    pub fn cross_domain(&self, domains: &mut Domains, seed: u64) -> Result<CrossEvalMatrix> {
        let (ma, _) = self.pretrain(&mut domains.a, seed)?;
        let (mb, _) = self.pretrain(&mut domains.b, seed)?;
        let models = [
            NamedModel {
                name: "A".into(),
                model: &ma,
                class_names: domains.class_names.clone(),
            },
            NamedModel {
                name: "B".into(),
                model: &mb,
                class_names: domains.class_names.clone(),
            },
        ];
        let mut loaders = [("A".to_string(), domains.a.clone()), ("B".to_string(), domains.b.clone())];
        cross_eval(&models, &mut loaders, Split::Test, 64)
    }
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
