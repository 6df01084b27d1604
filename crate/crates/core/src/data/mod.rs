//! Folder-per-class datasets: scanning, splitting, augmentation and batching.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::NdArray;

pub mod image;
pub mod synth;

pub use image::RgbImage;
pub use synth::{synth_domain, SynthSpec, SynthSummary};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Optional file under the dataset root mapping `class/file` (or bare file
/// name) to a group key, one tab-separated pair per line.
pub const GROUPS_FILE: &str = "groups.tsv";

const UNSUPPORTED_EXTENSIONS: [&str; 8] = ["png", "jpg", "jpeg", "bmp", "gif", "tif", "tiff", "webp"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no images found under {0}")]
    EmptyRoot(PathBuf),
    #[error("cannot decode {path}: {detail}")]
    Decode { path: PathBuf, detail: String },
    #[error("unsupported image format: {0} (only binary PPM is read)")]
    UnsupportedFormat(PathBuf),
    #[error("malformed {GROUPS_FILE} line {line}: {detail}")]
    Groups { line: usize, detail: String },
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("split `{0}` is empty")]
    EmptySplit(Split),
    #[error("sample {index} is not in split `{split}`")]
    NotInSplit { index: usize, split: Split },
    #[error("invalid augmentation: {0}")]
    InvalidAugment(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSynth(String),
    #[error("malformed manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub class_id: usize,
    pub group: Option<String>,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Manifest indices assigned to `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == Some(split))
            .collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].class_id).collect()
    }

    pub fn class_counts(&self, split: Option<Split>) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            if split.is_none() || s.split == split {
                counts[s.class_id] += 1;
            }
        }
        counts
    }

    /// `path, class, group, split` rows with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("path\tclass\tgroup\tsplit\n");
        for s in &self.samples {
            out += &format!(
                "{}\t{}\t{}\t{}\n",
                s.path.display(),
                self.class_names[s.class_id],
                s.group.as_deref().unwrap_or(""),
                s.split.map(|v| v.to_string()).unwrap_or_default()
            );
        }
        out
    }

    /// Inverse of [`to_tsv`](Self::to_tsv). Class ids follow sorted class names.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(DataError::Manifest {
                    line: n + 1,
                    detail: format!("expected 4 columns, got {}", cols.len()),
                });
            }
            let split = match cols[3] {
                "" => None,
                s => Some(s.parse().map_err(|detail| DataError::Manifest { line: n + 1, detail })?),
            };
            rows.push((cols[0], cols[1], cols[2], split));
        }
        let mut class_names: Vec<String> = rows.iter().map(|r| r.1.to_string()).collect();
        class_names.sort();
        class_names.dedup();
        let samples = rows
            .into_iter()
            .map(|(path, class, group, split)| Sample {
                path: PathBuf::from(path),
                class_id: class_names.binary_search_by(|c| c.as_str().cmp(class)).unwrap(),
                group: (!group.is_empty()).then(|| group.to_string()),
                split,
            })
            .collect();
        Ok(Self { class_names, samples })
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| DataError::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

fn read_groups(root: &Path) -> Result<HashMap<String, String>> {
    let path = root.join(GROUPS_FILE);
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((file, group)) = line.split_once('\t') else {
            return Err(DataError::Groups {
                line: n + 1,
                detail: "expected `file<TAB>group`".into(),
            });
        };
        map.insert(file.to_string(), group.to_string());
    }
    Ok(map)
}

/// Walks `root/<class>/<file>.ppm`. Classes and files are ordered
/// lexicographically, so rescanning an unchanged tree gives the same manifest.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    let groups = read_groups(root)?;
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    for entry in sorted_entries(root)? {
        let class_dir = entry.path();
        if !class_dir.is_dir() {
            continue;
        }
        let class = entry.file_name().to_string_lossy().into_owned();
        let class_id = class_names.len();
        let mut found = false;
        for file in sorted_entries(&class_dir)? {
            let path = file.path();
            let name = file.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') || !path.is_file() {
                continue;
            }
            let ext = path
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if UNSUPPORTED_EXTENSIONS.contains(&ext.as_str()) {
                return Err(DataError::UnsupportedFormat(path));
            }
            if ext != "ppm" {
                log::debug!("skipping {}", path.display());
                continue;
            }
            image::probe_ppm(&path)?;
            let group = groups
                .get(&format!("{class}/{name}"))
                .or_else(|| groups.get(&name))
                .cloned();
            samples.push(Sample {
                path,
                class_id,
                group,
                split: None,
            });
            found = true;
        }
        if found {
            class_names.push(class);
        }
    }
    if samples.is_empty() {
        return Err(DataError::EmptyRoot(root.to_path_buf()));
    }
    Ok(DatasetManifest { class_names, samples })
}

/// Largest-remainder apportionment of `n` items by `ratios`; ties go to the
/// earlier split.
pub fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidRatios(ratios));
    }
    Ok(())
}

/// Assigns every sample to train/val/test.
///
/// Without `by_group` the split is stratified per class. With it, whole
/// groups are shuffled and poured into train, then val, then test, so no group
/// straddles two splits; samples without a group key form their own group.
pub fn split(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64, by_group: bool) -> Result<DatasetManifest> {
    check_ratios(ratios)?;
    let mut out = manifest.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if by_group {
        let mut order: Vec<String> = Vec::new();
        let mut members: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, s) in manifest.samples.iter().enumerate() {
            let key = s
                .group
                .clone()
                .unwrap_or_else(|| format!("\0{}", s.path.display()));
            let slot = members.entry(key.clone()).or_default();
            if slot.is_empty() {
                order.push(key);
            }
            slot.push(i);
        }
        order.shuffle(&mut rng);
        let n = manifest.len() as f64;
        let bounds = [ratios[0] * n, (ratios[0] + ratios[1]) * n];
        let mut filled = 0usize;
        for key in order {
            let pos = filled as f64;
            let split = if pos < bounds[0] {
                Split::Train
            } else if pos < bounds[1] {
                Split::Val
            } else {
                Split::Test
            };
            for &i in &members[&key] {
                out.samples[i].split = Some(split);
            }
            filled += members[&key].len();
        }
    } else {
        let needed = ratios.iter().filter(|&&r| r > 0.0).count();
        for class in 0..manifest.num_classes() {
            let mut idx: Vec<usize> = (0..manifest.len())
                .filter(|&i| manifest.samples[i].class_id == class)
                .collect();
            if idx.len() < needed {
                log::warn!(
                    "class `{}` has {} samples, fewer than {needed} splits; all go to train",
                    manifest.class_names[class],
                    idx.len()
                );
                for &i in &idx {
                    out.samples[i].split = Some(Split::Train);
                }
                continue;
            }
            idx.shuffle(&mut rng);
            let [n_train, n_val, _] = apportion(idx.len(), ratios);
            for (pos, &i) in idx.iter().enumerate() {
                out.samples[i].split = Some(if pos < n_train {
                    Split::Train
                } else if pos < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_hflip")]
    pub hflip_prob: f64,
    #[serde(default = "default_rotation")]
    pub rotation_max_deg: f64,
    #[serde(default = "default_resize")]
    pub resize: usize,
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
fn default_resize() -> usize {
    224
}
fn default_mean() -> [f32; 3] {
    IMAGENET_MEAN
}
fn default_std() -> [f32; 3] {
    IMAGENET_STD
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: default_hflip(),
            rotation_max_deg: default_rotation(),
            resize: default_resize(),
            normalize_mean: IMAGENET_MEAN,
            normalize_std: IMAGENET_STD,
        }
    }
}

impl AugmentConfig {
    /// No randomness: train mode produces the same pixels as eval mode.
    pub fn none(resize: usize) -> Self {
        Self {
            hflip_prob: 0.0,
            rotation_max_deg: 0.0,
            resize,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(DataError::InvalidAugment(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        if !(self.rotation_max_deg >= 0.0) {
            return Err(DataError::InvalidAugment("rotation_max_deg must be ≥ 0".into()));
        }
        if self.resize < 4 {
            return Err(DataError::InvalidAugment(format!("resize {} below 4", self.resize)));
        }
        if self.normalize_std.iter().any(|&s| !(s > 0.0)) {
            return Err(DataError::InvalidAugment("normalize_std must be positive".into()));
        }
        Ok(())
    }

    /// `(x/255 − mean)/std` per channel, in place on a planar buffer.
    pub fn normalize(&self, buf: &mut [f32]) {
        let plane = buf.len() / 3;
        for (c, chunk) in buf.chunks_exact_mut(plane).enumerate() {
            let (m, s) = (self.normalize_mean[c], self.normalize_std[c]);
            for v in chunk {
                *v = (*v / 255.0 - m) / s;
            }
        }
    }

    pub fn denormalize(&self, buf: &mut [f32]) {
        let plane = buf.len() / 3;
        for (c, chunk) in buf.chunks_exact_mut(plane).enumerate() {
            let (m, s) = (self.normalize_mean[c], self.normalize_std[c]);
            for v in chunk {
                *v = (*v * s + m) * 255.0;
            }
        }
    }
}

/// SplitMix64 finalizer over the combined inputs.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z = (z ^ p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Decodes and batches samples from a manifest. Decoded, resized images can
/// be cached since augmentation runs after the resize.
#[derive(Clone, Debug)]
pub struct Loader {
    manifest: DatasetManifest,
    augment: AugmentConfig,
    cache: Option<Vec<Option<Vec<f32>>>>,
}

impl Loader {
    pub fn new(manifest: DatasetManifest, augment: AugmentConfig) -> Result<Self> {
        augment.validate()?;
        Ok(Self {
            manifest,
            augment,
            cache: None,
        })
    }

    /// Keeps every resized image in memory after its first decode.
    pub fn cached(mut self) -> Self {
        self.cache = Some(vec![None; self.manifest.len()]);
        self
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn augment(&self) -> &AugmentConfig {
        &self.augment
    }

    fn resized(&mut self, index: usize) -> Result<Vec<f32>> {
        if let Some(Some(img)) = self.cache.as_ref().map(|c| &c[index]) {
            return Ok(img.clone());
        }
        let img = image::read_ppm(&self.manifest.samples[index].path)?;
        let s = self.augment.resize;
        let out = image::resize_bilinear(&img.to_planar(), 3, img.height, img.width, s, s);
        if let Some(cache) = &mut self.cache {
            cache[index] = Some(out.clone());
        }
        Ok(out)
    }

    /// One preprocessed sample, `[3, S, S]` planar.
    pub fn load_sample(&mut self, index: usize, train_mode: bool, seed: u64, epoch: u64) -> Result<Vec<f32>> {
        let s = self.augment.resize;
        let mut img = self.resized(index)?;
        if train_mode {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, index as u64]));
            let flip = rng.random::<f64>() < self.augment.hflip_prob;
            let max = self.augment.rotation_max_deg;
            let angle = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
            if flip {
                image::hflip(&mut img, 3, s, s);
            }
            if angle != 0.0 {
                img = image::rotate(&img, 3, s, s, angle as f32);
            }
        }
        self.augment.normalize(&mut img);
        Ok(img)
    }

    /// Stacks samples into `[N, 3, S, S]` with their labels. Every index must
    /// belong to `split`. The result depends only on `(seed, epoch, index)`.
    pub fn load_batch(
        &mut self,
        split: Split,
        indices: &[usize],
        train_mode: bool,
        seed: u64,
        epoch: u64,
    ) -> Result<(NdArray<f32>, Vec<usize>)> {
        let s = self.augment.resize;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for &i in indices {
            if self.manifest.samples.get(i).and_then(|x| x.split) != Some(split) {
                return Err(DataError::NotInSplit { index: i, split });
            }
            data.extend(self.load_sample(i, train_mode, seed, epoch)?);
        }
        let batch = NdArray::new([indices.len(), 3, s, s], data).expect("batch shape matches data");
        Ok((batch, self.manifest.labels(indices)))
    }
}

/// Stateless convenience wrapper around [`Loader::load_batch`].
pub fn load_batch(
    manifest: &DatasetManifest,
    split: Split,
    indices: &[usize],
    augment: &AugmentConfig,
    train_mode: bool,
    seed: u64,
    epoch: u64,
) -> Result<(NdArray<f32>, Vec<usize>)> {
    Loader::new(manifest.clone(), augment.clone())?.load_batch(split, indices, train_mode, seed, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(100, [0.8, 0.1, 0.1]), [80, 10, 10]);
        assert_eq!(apportion(7, [0.8, 0.1, 0.1]), [5, 1, 1]);
        assert_eq!(apportion(0, [0.8, 0.1, 0.1]), [0, 0, 0]);
        assert_eq!(apportion(3, [1.0, 0.0, 0.0]), [3, 0, 0]);
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let m = DatasetManifest {
            class_names: vec!["a".into()],
            samples: vec![],
        };
        assert!(split(&m, [0.5, 0.1, 0.1], 0, false).is_err());
        assert!(split(&m, [1.2, -0.1, -0.1], 0, false).is_err());
    }

    #[test]
    fn mix_seed_separates_inputs() {
        assert_ne!(mix_seed(&[1, 2, 3]), mix_seed(&[1, 3, 2]));
        assert_eq!(mix_seed(&[5, 0]), mix_seed(&[5, 0]));
    }

    #[test]
    fn normalize_round_trip() {
        let cfg = AugmentConfig::default();
        let orig: Vec<f32> = (0..12).map(|v| v as f32 * 20.0).collect();
        let mut buf = orig.clone();
        cfg.normalize(&mut buf);
        assert!((buf[0] - (-0.485 / 0.229)).abs() < 1e-6);
        cfg.denormalize(&mut buf);
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a / 255.0 - b / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn augment_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig { resize: 3, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { rotation_max_deg: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn manifest_tsv_round_trip() {
        let m = DatasetManifest {
            class_names: vec!["a".into(), "b".into()],
            samples: vec![
                Sample {
                    path: "r/a/1.ppm".into(),
                    class_id: 0,
                    group: Some("g1".into()),
                    split: Some(Split::Train),
                },
                Sample {
                    path: "r/b/2.ppm".into(),
                    class_id: 1,
                    group: None,
                    split: None,
                },
            ],
        };
        assert_eq!(DatasetManifest::from_tsv(&m.to_tsv()).unwrap(), m);
    }
}
