//! Command-line front end. `run` parses arguments, executes one subcommand and
//! returns the process exit code: 0 success, 1 other failure, 2 configuration
//! error, 3 numeric failure, 4 compatibility error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{is_head, Model, ModelConfig, ModelError};
use crate::data::image::{read_ppm, resize_bilinear, write_pgm};
use crate::data::{
    scan_dataset, split, synth_domain, AugmentConfig, DataError, DatasetManifest, Loader, Split, SynthSpec,
    IMAGENET_MEAN, IMAGENET_STD,
};
use crate::lora::{count_params_meta, inject, LoraConfig, LoraError, PeftModel};
use crate::metrics::Averaging;
use crate::persist::{self, CheckpointKind, PersistError};
use crate::tensor::NdArray;
use crate::train::{cross_eval, evaluate, train, Classifier, NamedModel, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("incompatible inputs: {0}")]
    Compat(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Compat(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::EmptyRoot(_)
            | DataError::InvalidRatios(_)
            | DataError::InvalidAugment(_)
            | DataError::InvalidSynth(_)
            | DataError::Groups { .. } => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Config(e.to_string()),
            ModelError::Tensor(crate::tensor::TensorError::NonFinite(_)) => CliError::Numeric(e.to_string()),
            ModelError::InputShape { .. } | ModelError::ClassOutOfRange { .. } => CliError::Compat(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<LoraError> for CliError {
    fn from(e: LoraError) -> Self {
        match e {
            LoraError::Model(m) => m.into(),
            LoraError::Incompatible { .. } => CliError::Compat(e.to_string()),
            LoraError::Tensor(_) => CliError::Other(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::Incompatible(_) | PersistError::WrongKind { .. } => CliError::Compat(e.to_string()),
            PersistError::Model(m) => match m {
                ModelError::MissingParam(_) | ModelError::ParamShape { .. } => CliError::Compat(m.to_string()),
                other => other.into(),
            },
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            TrainError::VocabMismatch { .. } => CliError::Compat(e.to_string()),
            TrainError::InvalidConfig(_) | TrainError::EmptySplit(_) => CliError::Config(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Lora(l) => l.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_other(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Other(format!("{}: {e}", path.display()))
}

/// `[model]` section: a preset plus optional overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_preset")]
    pub preset: String,
    pub depths: Option<Vec<usize>>,
    pub dims: Option<Vec<usize>>,
    pub image_size: Option<usize>,
}

fn default_preset() -> String {
    "base".into()
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: default_preset(),
            depths: None,
            dims: None,
            image_size: None,
        }
    }
}

/// `[lora]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(flatten)]
    pub config: LoraConfig,
}

impl Default for LoraSection {
    fn default() -> Self {
        Self {
            enabled: false,
            config: LoraConfig::default(),
        }
    }
}

/// `[augment]` section; `resize` falls back to the model's input size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default = "default_hflip")]
    pub hflip_prob: f64,
    #[serde(default = "default_rotation")]
    pub rotation_max_deg: f64,
    pub resize: Option<usize>,
    #[serde(default = "default_mean")]
    pub normalize_mean: [f32; 3],
    #[serde(default = "default_std")]
    pub normalize_std: [f32; 3],
}

fn default_hflip() -> f64 {
    0.5
}
fn default_rotation() -> f64 {
    15.0
}
fn default_mean() -> [f32; 3] {
    IMAGENET_MEAN
}
fn default_std() -> [f32; 3] {
    IMAGENET_STD
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            hflip_prob: default_hflip(),
            rotation_max_deg: default_rotation(),
            resize: None,
            normalize_mean: IMAGENET_MEAN,
            normalize_std: IMAGENET_STD,
        }
    }
}

/// `[data]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
    /// keep every `groups.tsv` group inside one split
    #[serde(default)]
    pub by_group: bool,
}

fn default_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            ratios: default_ratios(),
            split_seed: 0,
            by_group: false,
        }
    }
}

/// Everything a training run needs; loaded from TOML, then overridden by flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// output directory
    pub output: Option<PathBuf>,
    /// full-model checkpoint to start from
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub lora: LoraSection,
    #[serde(default)]
    pub data: DataSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Model architecture for `num_classes` outputs after applying overrides.
    pub fn model_config(&self, num_classes: usize) -> CliResult<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.model.preset, num_classes)
            .ok_or_else(|| CliError::Config(format!("unknown model preset `{}`", self.model.preset)))?;
        if let Some(d) = &self.model.depths {
            cfg.depths = d.clone();
        }
        if let Some(d) = &self.model.dims {
            cfg.dims = d.clone();
        }
        cfg.image_size = self.image_size()?;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn image_size(&self) -> CliResult<usize> {
        let preset = ModelConfig::preset(&self.model.preset, 1)
            .ok_or_else(|| CliError::Config(format!("unknown model preset `{}`", self.model.preset)))?;
        match (self.model.image_size, self.augment.resize) {
            (Some(a), Some(b)) if a != b => Err(CliError::Config(format!(
                "model.image_size {a} differs from augment.resize {b}"
            ))),
            (Some(a), _) | (None, Some(a)) => Ok(a),
            (None, None) => Ok(preset.image_size),
        }
    }

    pub fn augment_config(&self) -> CliResult<AugmentConfig> {
        let a = &self.augment;
        let cfg = AugmentConfig {
            hflip_prob: a.hflip_prob,
            rotation_max_deg: a.rotation_max_deg,
            resize: self.image_size()?,
            normalize_mean: a.normalize_mean,
            normalize_std: a.normalize_std,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "convnext-lora", version, about = "LoRA fine-tuning of ConvNeXtV2 image classifiers on the CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic folder-per-class dataset
    Synth(SynthArgs),
    /// Train a model (full or LoRA) on a dataset
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on one split of a dataset
    Eval(EvalArgs),
    /// Accuracy of every checkpoint on every dataset's test split
    CrossEval(CrossEvalArgs),
    /// Fold an adapter checkpoint into its base weights
    Merge(MergeArgs),
    /// Input-gradient saliency map for one image
    Saliency(SaliencyArgs),
    /// Parameter counts for a configuration or checkpoint
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of classes (at least 2)
    #[arg(long)]
    pub classes: usize,
    /// Images per class
    #[arg(long)]
    pub per_class: usize,
    /// Sets both palette and texture shift, in [0, 1]
    #[arg(long, default_value_t = 0.0)]
    pub shift: f64,
    /// Overrides the palette part of --shift
    #[arg(long)]
    pub palette_shift: Option<f64>,
    /// Overrides the texture part of --shift
    #[arg(long)]
    pub texture_shift: Option<f64>,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Consecutive images sharing pose and color
    #[arg(long, default_value_t = 4)]
    pub group_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Destination directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root (folder per class)
    #[arg(long = "data.root", value_name = "DIR")]
    pub root: Option<PathBuf>,
    /// Train/val/test fractions [default: 0.8,0.1,0.1]
    #[arg(long = "data.ratios", value_delimiter = ',', num_args = 3, value_name = "R")]
    pub ratios: Option<Vec<f64>>,
    /// Seed of the train/val/test assignment [default: 0]
    #[arg(long = "data.split_seed", value_name = "N")]
    pub split_seed: Option<u64>,
    /// Keep groups from groups.tsv inside one split [default: false]
    #[arg(long = "data.by_group", value_name = "BOOL")]
    pub by_group: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: runs/latest]
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Full-model checkpoint to fine-tune from
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Shorthand for --train.seed
    #[arg(long)]
    pub seed: Option<u64>,

    /// Architecture preset: base, tiny or toy [default: base]
    #[arg(long = "model.preset", value_name = "NAME")]
    pub preset: Option<String>,
    /// Blocks per stage, e.g. 1,1,1,1
    #[arg(long = "model.depths", value_delimiter = ',', value_name = "N")]
    pub depths: Option<Vec<usize>>,
    /// Channels per stage, e.g. 8,16,32,64
    #[arg(long = "model.dims", value_delimiter = ',', value_name = "N")]
    pub dims: Option<Vec<usize>>,
    /// Input resolution [default: preset's, 224 for base]
    #[arg(long = "model.image_size", value_name = "PX")]
    pub image_size: Option<usize>,

    /// AdamW learning rate [default: 1e-4]
    #[arg(long = "train.lr", value_name = "LR")]
    pub lr: Option<f64>,
    /// Decoupled weight decay for matrices and kernels [default: 0.05]
    #[arg(long = "train.weight_decay", value_name = "WD")]
    pub weight_decay: Option<f64>,
    /// Maximum number of epochs [default: 30]
    #[arg(long = "train.max_epochs", value_name = "N")]
    pub max_epochs: Option<usize>,
    /// Mini-batch size [default: 32]
    #[arg(long = "train.batch_size", value_name = "N")]
    pub batch_size: Option<usize>,
    /// Epochs without a new best validation accuracy before stopping [default: 5]
    #[arg(long = "train.patience", value_name = "N")]
    pub patience: Option<usize>,
    /// Seed for initialization, shuffling, augmentation and dropout [default: 0]
    #[arg(long = "train.seed", value_name = "N")]
    pub train_seed: Option<u64>,

    /// Train low-rank adapters and the head instead of the full model [default: false]
    #[arg(long = "lora.enabled", value_name = "BOOL")]
    pub lora_enabled: Option<bool>,
    /// Adapter rank r [default: 16]
    #[arg(long = "lora.rank", value_name = "R")]
    pub rank: Option<usize>,
    /// Adapter scale numerator; the update is multiplied by alpha/r [default: 32]
    #[arg(long = "lora.alpha", value_name = "A")]
    pub alpha: Option<f64>,
    /// Dropout on the adapter input [default: 0.1]
    #[arg(long = "lora.dropout", value_name = "P")]
    pub dropout: Option<f64>,
    /// Projection layers receiving adapters [default: fc1,fc2]
    #[arg(long = "lora.targets", value_delimiter = ',', value_name = "NAME")]
    pub targets: Option<Vec<String>>,

    /// Probability of a horizontal flip [default: 0.5]
    #[arg(long = "augment.hflip_prob", value_name = "P")]
    pub hflip_prob: Option<f64>,
    /// Largest random rotation in degrees [default: 15]
    #[arg(long = "augment.rotation_max_deg", value_name = "DEG")]
    pub rotation_max_deg: Option<f64>,
    /// Resize target; must agree with model.image_size [default: model input size]
    #[arg(long = "augment.resize", value_name = "PX")]
    pub resize: Option<usize>,

    #[command(flatten)]
    pub data: DataArgs,
}

impl TrainArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = &$src {
                    $dst = v.clone();
                }
            };
        }
        if self.output.is_some() {
            c.output = self.output.clone();
        }
        if self.init.is_some() {
            c.init = self.init.clone();
        }
        set!(self.seed => c.train.seed);
        set!(self.preset => c.model.preset);
        if self.depths.is_some() {
            c.model.depths = self.depths.clone();
        }
        if self.dims.is_some() {
            c.model.dims = self.dims.clone();
        }
        if self.image_size.is_some() {
            c.model.image_size = self.image_size;
        }
        set!(self.lr => c.train.lr);
        set!(self.weight_decay => c.train.weight_decay);
        set!(self.max_epochs => c.train.max_epochs);
        set!(self.batch_size => c.train.batch_size);
        set!(self.patience => c.train.patience);
        set!(self.train_seed => c.train.seed);
        set!(self.lora_enabled => c.lora.enabled);
        set!(self.rank => c.lora.config.rank);
        set!(self.alpha => c.lora.config.alpha);
        set!(self.dropout => c.lora.config.dropout);
        set!(self.targets => c.lora.config.targets);
        set!(self.hflip_prob => c.augment.hflip_prob);
        set!(self.rotation_max_deg => c.augment.rotation_max_deg);
        if self.resize.is_some() {
            c.augment.resize = self.resize;
        }
        if self.data.root.is_some() {
            c.data.root = self.data.root.clone();
        }
        if let Some(r) = &self.data.ratios {
            c.data.ratios = [r[0], r[1], r[2]];
        }
        set!(self.data.split_seed => c.data.split_seed);
        set!(self.data.by_group => c.data.by_group);
        if c.output.is_none() {
            c.output = Some(PathBuf::from("runs/latest"));
        }
        // record the effective input size so the echo is self-contained
        let size = c.image_size()?;
        c.model.image_size = Some(size);
        c.augment.resize = Some(size);
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset root (folder per class)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Manifest TSV written by `train`; takes precedence over --data
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Train/val/test fractions used to rebuild the split
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, default_value_t = false)]
    pub by_group: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Base or adapter checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Base checkpoint the adapters attach to (adapter checkpoints only)
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Which split to score
    #[arg(long = "on", default_value = "test")]
    pub on: Split,
    #[arg(long, default_value = "weighted")]
    pub averaging: Averaging,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Write the metrics TSV here
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write per-sample predictions here
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CrossEvalArgs {
    /// NAME=CHECKPOINT, repeated; rows of the matrix
    #[arg(long = "model", required = true, value_name = "NAME=CKPT")]
    pub models: Vec<String>,
    /// NAME=DIR, repeated; columns of the matrix
    #[arg(long = "dataset", required = true, value_name = "NAME=DIR")]
    pub datasets: Vec<String>,
    /// Base checkpoint for any adapter checkpoints among --model
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, default_value_t = false)]
    pub by_group: bool,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Write the matrix TSV here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub adapter: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Binary PPM input
    #[arg(long)]
    pub image: PathBuf,
    /// Class name or index [default: the predicted class]
    #[arg(long)]
    pub class: Option<String>,
    /// Grayscale PGM output, same size as the input image
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Count a checkpoint's model instead of a configuration
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// TOML run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture preset [default: base]
    #[arg(long = "model.preset", value_name = "NAME")]
    pub preset: Option<String>,
    /// Output classes of the head
    #[arg(long, default_value_t = 1000)]
    pub classes: usize,
    /// Count adapters as well [default: false]
    #[arg(long = "lora.enabled", value_name = "BOOL")]
    pub lora_enabled: Option<bool>,
    /// Adapter rank r [default: 16]
    #[arg(long = "lora.rank", value_name = "R")]
    pub rank: Option<usize>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::CrossEval(a) => cmd_cross_eval(&a),
        Command::Merge(a) => cmd_merge(&a),
        Command::Saliency(a) => cmd_saliency(&a),
        Command::Params(a) => cmd_params(&a),
    }
}

fn cmd_synth(a: &SynthArgs) -> CliResult {
    let spec = SynthSpec {
        num_classes: a.classes,
        samples_per_class: a.per_class,
        image_size: a.size,
        palette_shift: a.palette_shift.unwrap_or(a.shift),
        texture_shift: a.texture_shift.unwrap_or(a.shift),
        seed: a.seed,
        group_size: a.group_size,
    };
    let summary = synth_domain(&spec, &a.out)?;
    println!("{}", summary.root.display());
    for (name, n) in summary.class_names.iter().zip(&summary.counts) {
        println!("{name}\t{n}");
    }
    println!("total\t{}", summary.total());
    Ok(())
}

fn prepare_manifest(root: &Path, ratios: [f64; 3], seed: u64, by_group: bool) -> CliResult<DatasetManifest> {
    if !root.is_dir() {
        return Err(CliError::Config(format!("dataset root {} does not exist", root.display())));
    }
    Ok(split(&scan_dataset(root)?, ratios, seed, by_group)?)
}

fn ratios3(v: &[f64]) -> CliResult<[f64; 3]> {
    v.try_into()
        .map_err(|_| CliError::Config(format!("expected 3 ratios, got {}", v.len())))
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(io_other(path))
}

fn cmd_train(a: &TrainArgs) -> CliResult {
    let cfg = a.resolve()?;
    cfg.train.validate()?;
    let root = cfg
        .data
        .root
        .clone()
        .ok_or_else(|| CliError::Config("no dataset given (data.root)".into()))?;
    let out = cfg.output.clone().expect("resolve sets output");
    let augment = cfg.augment_config()?;
    let manifest = prepare_manifest(&root, cfg.data.ratios, cfg.data.split_seed, cfg.data.by_group)?;
    let classes = manifest.class_names.clone();
    let model_cfg = cfg.model_config(classes.len())?;
    if cfg.lora.enabled {
        cfg.lora.config.validate()?;
    }

    let mut model = match &cfg.init {
        Some(p) => {
            let (m, _) = persist::load_model(p)?;
            if !m.config().same_backbone(&model_cfg) {
                return Err(CliError::Compat(format!(
                    "init checkpoint {} does not match the configured architecture",
                    p.display()
                )));
            }
            m
        }
        None => Model::build(&model_cfg, cfg.train.seed)?,
    };
    model.reset_head(classes.len(), cfg.train.seed ^ 0x4845_4144)?;

    fs::create_dir_all(&out).map_err(io_other(&out))?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    write_file(&out.join("manifest.tsv"), &manifest.to_tsv())?;

    let mut loader = Loader::new(manifest, augment)?.cached();
    let (history, classifier): (_, Box<dyn Classifier>) = if cfg.lora.enabled {
        let mut peft = inject(model, &cfg.lora.config, cfg.train.seed)?;
        let c = peft.count_params();
        println!("trainable parameters: {} of {}", c.trainable, c.total);
        let history = train(&mut peft, &mut loader, &cfg.train)?;
        persist::save_adapter(&peft, &classes, &out.join("adapter.ckpt"))?;
        (history, Box::new(peft))
    } else {
        let history = train(&mut model, &mut loader, &cfg.train)?;
        persist::save_model(&model, &classes, &out.join("model.ckpt"))?;
        (history, Box::new(model))
    };
    write_file(&out.join("history.csv"), &history.to_csv())?;
    if let Some(best) = history.best() {
        println!(
            "best epoch {} of {}: val accuracy {:.2}%",
            history.best_epoch,
            history.epochs.len(),
            100.0 * best.val_accuracy
        );
    }
    if !loader.manifest().indices(Split::Test).is_empty() {
        let (report, preds) = evaluate(classifier.as_ref(), &mut loader, Split::Test, Averaging::Weighted, 64)?;
        write_file(&out.join("metrics.tsv"), &report.to_tsv(&classes))?;
        write_file(&out.join("predictions.tsv"), &preds.to_tsv(&classes))?;
        println!("test split:\n{report}");
    }
    println!("outputs in {}", out.display());
    Ok(())
}

/// A loaded checkpoint ready for inference.
pub enum LoadedModel {
    Plain(Model<f32>),
    Adapted(PeftModel<f32>),
}

impl LoadedModel {
    pub fn classifier(&self) -> &dyn Classifier {
        match self {
            LoadedModel::Plain(m) => m,
            LoadedModel::Adapted(p) => p,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            LoadedModel::Plain(m) => m.config(),
            LoadedModel::Adapted(p) => p.model_config(),
        }
    }

    pub fn saliency(&self, image: &NdArray<f32>, class: usize) -> CliResult<NdArray<f32>> {
        Ok(match self {
            LoadedModel::Plain(m) => m.saliency(image, class)?,
            LoadedModel::Adapted(p) => p.saliency(image, class)?,
        })
    }
}

/// Loads a base or adapter checkpoint; adapters need `base`.
pub fn load_checkpoint(path: &Path, base: Option<&Path>) -> CliResult<(LoadedModel, Vec<String>)> {
    let ck = persist::read_checkpoint(path)?;
    match ck.header.kind {
        CheckpointKind::Base => {
            let (m, c) = ck.into_model()?;
            Ok((LoadedModel::Plain(m), c))
        }
        CheckpointKind::Adapter => {
            let base = base.ok_or_else(|| {
                CliError::Config(format!("{} holds adapters; pass --base with its base checkpoint", path.display()))
            })?;
            let (b, _) = persist::load_model(base)?;
            let (p, c) = ck.into_peft(b)?;
            Ok((LoadedModel::Adapted(p), c))
        }
    }
}

fn eval_loader(s: &SplitArgs, image_size: usize) -> CliResult<Loader> {
    let manifest = match (&s.manifest, &s.data) {
        (Some(m), _) => {
            let text = fs::read_to_string(m).map_err(|e| CliError::Config(format!("{}: {e}", m.display())))?;
            DatasetManifest::from_tsv(&text)?
        }
        (None, Some(root)) => prepare_manifest(root, ratios3(&s.ratios)?, s.split_seed, s.by_group)?,
        (None, None) => return Err(CliError::Config("pass --data or --manifest".into())),
    };
    Ok(Loader::new(manifest, AugmentConfig::none(image_size))?)
}

fn check_vocab(model: &[String], data: &[String]) -> CliResult {
    if model != data {
        return Err(CliError::Compat(format!(
            "checkpoint classes {model:?} differ from dataset classes {data:?}"
        )));
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let (model, classes) = load_checkpoint(&a.checkpoint, a.base.as_deref())?;
    let mut loader = eval_loader(&a.split, model.config().image_size)?;
    check_vocab(&classes, &loader.manifest().class_names)?;
    let (report, preds) = evaluate(model.classifier(), &mut loader, a.on, a.averaging, a.batch_size)?;
    println!("{report}");
    if let Some(p) = &a.out {
        write_file(p, &report.to_tsv(&classes))?;
    }
    if let Some(p) = &a.predictions {
        write_file(p, &preds.to_tsv(&classes))?;
    }
    Ok(())
}

fn name_value(s: &str) -> CliResult<(String, PathBuf)> {
    let (n, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("expected NAME=PATH, got `{s}`")))?;
    Ok((n.to_string(), PathBuf::from(v)))
}

fn cmd_cross_eval(a: &CrossEvalArgs) -> CliResult {
    let mut loaded = Vec::new();
    for spec in &a.models {
        let (name, path) = name_value(spec)?;
        let (m, classes) = load_checkpoint(&path, a.base.as_deref())?;
        loaded.push((name, m, classes));
    }
    let size = loaded[0].1.config().image_size;
    if loaded.iter().any(|(_, m, _)| m.config().image_size != size) {
        return Err(CliError::Compat("checkpoints disagree on input size".into()));
    }
    let mut datasets = Vec::new();
    for spec in &a.datasets {
        let (name, root) = name_value(spec)?;
        let manifest = prepare_manifest(&root, ratios3(&a.ratios)?, a.split_seed, a.by_group)?;
        datasets.push((name, Loader::new(manifest, AugmentConfig::none(size))?));
    }
    let models: Vec<NamedModel<'_>> = loaded
        .iter()
        .map(|(name, m, classes)| NamedModel {
            name: name.clone(),
            model: m.classifier(),
            class_names: classes.clone(),
        })
        .collect();
    let matrix = cross_eval(&models, &mut datasets, Split::Test, a.batch_size)?;
    println!("{matrix}");
    if let Some(p) = &a.out {
        write_file(p, &matrix.to_tsv())?;
    }
    Ok(())
}

fn cmd_merge(a: &MergeArgs) -> CliResult {
    let (base, _) = persist::load_model(&a.base)?;
    let (peft, classes) = persist::load_adapter(&a.adapter, base)?;
    let merged = peft.merged()?;
    let n = persist::save_model(&merged, &classes, &a.out)?;
    println!("merged {} adapters into {} ({n} bytes)", peft.adapters().len(), a.out.display());
    Ok(())
}

fn cmd_saliency(a: &SaliencyArgs) -> CliResult {
    let (model, classes) = load_checkpoint(&a.checkpoint, a.base.as_deref())?;
    let img = read_ppm(&a.image)?;
    let size = model.config().image_size;
    let aug = AugmentConfig::none(size);
    let mut planar = resize_bilinear(&img.to_planar(), 3, img.height, img.width, size, size);
    aug.normalize(&mut planar);
    let x = NdArray::new([3, size, size], planar).map_err(|e| CliError::Other(e.to_string()))?;
    let class = match &a.class {
        None => {
            let batch = x.clone().reshape([1, 3, size, size]).map_err(|e| CliError::Other(e.to_string()))?;
            model.classifier().logits(&batch)?.argmax_rows()[0]
        }
        Some(c) => match classes.iter().position(|n| n == c) {
            Some(i) => i,
            None => c
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("unknown class `{c}`")))?,
        },
    };
    let map = model.saliency(&x, class)?;
    let pixels = saliency_pixels(map.data(), size, size, img.height, img.width);
    write_pgm(&a.out, img.width, img.height, &pixels)?;
    println!(
        "saliency for class {} ({}) written to {}",
        class,
        classes.get(class).map(String::as_str).unwrap_or("?"),
        a.out.display()
    );
    Ok(())
}

/// Resizes a `[0, 1]` map to the output size and stretches it to 0..=255.
/// An all-zero map stays black.
pub fn saliency_pixels(map: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let resized = resize_bilinear(map, 1, h, w, out_h, out_w);
    let lo = resized.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = resized.iter().copied().fold(0.0f32, f32::max);
    resized
        .iter()
        .map(|&v| {
            if hi <= 0.0 {
                0
            } else if hi == lo {
                255
            } else {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            }
        })
        .collect()
}

fn group_digits(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// `component\tparameters` table for a model with optional adapters.
pub fn params_table(model: &ModelConfig, lora: Option<&LoraConfig>) -> String {
    let layout = model.layout();
    let head: usize = layout.iter().filter(|p| is_head(&p.name)).map(|p| p.numel()).sum();
    let all = count_params_meta(model, lora);
    let base_total: usize = layout.iter().map(|p| p.numel()).sum();
    let adapters = all.total - base_total;
    let mut out = String::new();
    let _ = writeln!(out, "component\tparameters");
    let _ = writeln!(out, "backbone\t{}", group_digits(base_total - head));
    let _ = writeln!(out, "head\t{}", group_digits(head));
    if let Some(cfg) = lora {
        let _ = writeln!(out, "adapters (r={})\t{}", cfg.rank, group_digits(adapters));
    }
    let _ = writeln!(out, "total\t{}", group_digits(all.total));
    let _ = writeln!(out, "trainable\t{}", group_digits(all.trainable));
    out
}

fn cmd_params(a: &ParamsArgs) -> CliResult {
    let (model, lora) = if let Some(path) = &a.checkpoint {
        let h = persist::read_header(path)?;
        (h.model, h.lora)
    } else {
        let mut run = match &a.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &a.preset {
            run.model.preset = p.clone();
        }
        if let Some(e) = a.lora_enabled {
            run.lora.enabled = e;
        }
        if let Some(r) = a.rank {
            run.lora.config.rank = r;
        }
        let model = run.model_config(a.classes)?;
        (model, run.lora.enabled.then(|| run.lora.config.clone()))
    };
    if let Some(l) = &lora {
        l.validate()?;
    }
    print!("{}", params_table(&model, lora.as_ref()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_are_grouped() {
        assert_eq!(group_digits(2887680), "2,887,680");
        assert_eq!(group_digits(512), "512");
        assert_eq!(group_digits(1000), "1,000");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlr = 1e-3\n").is_ok());
        let err = RunConfig::from_toml("[train]\nlearning_rate = 1e-3\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let args = Cli::try_parse_from([
            "convnext-lora",
            "train",
            "--model.preset",
            "toy",
            "--lora.rank",
            "16",
            "--lora.alpha",
            "32",
            "--lora.dropout",
            "0.1",
            "--data.root",
            "x",
        ])
        .unwrap();
        let Command::Train(t) = args.command else { panic!() };
        let cfg = t.resolve().unwrap();
        assert_eq!(cfg.model.image_size, Some(32));
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.lora.config.rank, 16);
    }

    #[test]
    fn conflicting_sizes_are_a_config_error() {
        let mut c = RunConfig::default();
        c.model.image_size = Some(64);
        c.augment.resize = Some(32);
        assert_eq!(c.image_size().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn saliency_pixels_span_full_range() {
        let px = saliency_pixels(&[0.0, 0.5, 0.25, 1.0], 2, 2, 4, 4);
        assert_eq!(px.iter().min(), Some(&0));
        assert_eq!(px.iter().max(), Some(&255));
        assert!(saliency_pixels(&[0.0; 4], 2, 2, 3, 3).iter().all(|&v| v == 0));
    }
}
