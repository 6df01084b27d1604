//! Synthetic shape datasets with a controllable source shift.
//!
//! Every class is a geometric pattern. Two knobs change how a "source" renders
//! the same patterns: `palette_shift` rotates the hues and flips the
//! foreground/background brightness polarity, `texture_shift` overlays a fine
//! checker texture on the foreground, oriented stripes on the background and
//! raises sensor noise. The class semantics (the shape) never change.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::image::{write_ppm, RgbImage};
use super::{mix_seed, DataError, Result, GROUPS_FILE};

/// Background stripe contrast at full texture shift.
const STRIPE_AMPLITUDE: f64 = 0.4;

pub const FAMILIES: [&str; 12] = [
    "disk", "ring", "hbars", "vbars", "cross", "xcross", "frame", "triangle", "checker", "dots", "stripes",
    "halfdisk",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    #[serde(default)]
    pub palette_shift: f64,
    #[serde(default)]
    pub texture_shift: f64,
    #[serde(default)]
    pub seed: u64,
    /// Consecutive samples of a class that share pose and color, like frames
    /// of one video.
    #[serde(default = "default_group")]
    pub group_size: usize,
}

fn default_size() -> usize {
    32
}
fn default_group() -> usize {
    4
}

impl SynthSpec {
    pub fn new(num_classes: usize, samples_per_class: usize, shift: f64, seed: u64) -> Self {
        Self {
            num_classes,
            samples_per_class,
            image_size: default_size(),
            palette_shift: shift,
            texture_shift: shift,
            seed,
            group_size: default_group(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidSynth(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.samples_per_class == 0 || self.group_size == 0 {
            return bad("samples_per_class and group_size must be positive".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} below 8", self.image_size));
        }
        for (name, v) in [("palette_shift", self.palette_shift), ("texture_shift", self.texture_shift)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|k| {
                let family = FAMILIES[k % FAMILIES.len()];
                match k / FAMILIES.len() {
                    0 => format!("c{k:02}_{family}"),
                    v => format!("c{k:02}_{family}{v}"),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
}

impl SynthSummary {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Pose and color shared by a group.
struct Look {
    dx: f64,
    dy: f64,
    scale: f64,
    angle: f64,
    hue: f64,
    value: f64,
    stripe_angle: f64,
}

fn in_box(u: f64, v: f64, half: f64) -> bool {
    u.abs() < half && v.abs() < half
}

fn even(x: f64) -> bool {
    (x.floor() as i64).rem_euclid(2) == 0
}

fn family_mask(family: usize, u: f64, v: f64) -> bool {
    let r = u.hypot(v);
    match family {
        0 => r < 0.5,
        1 => (0.32..0.58).contains(&r),
        2 => in_box(u, v, 0.65) && even((v + 0.65) / 0.26),
        3 => in_box(u, v, 0.65) && even((u + 0.65) / 0.26),
        4 => (u.abs() < 0.17 && v.abs() < 0.7) || (v.abs() < 0.17 && u.abs() < 0.7),
        5 => {
            let (a, b) = ((u + v) / 2f64.sqrt(), (u - v) / 2f64.sqrt());
            (a.abs() < 0.15 && b.abs() < 0.75) || (b.abs() < 0.15 && a.abs() < 0.75)
        }
        6 => (0.42..0.64).contains(&u.abs().max(v.abs())),
        7 => v <= 0.5 && u.abs() <= (v + 0.6) * 0.6,
        8 => in_box(u, v, 0.66) && even((u + 0.66) / 0.33) == even((v + 0.66) / 0.33),
        9 => (u - 0.38).hypot(v) < 0.24 || (u + 0.38).hypot(v) < 0.24,
        10 => in_box(u, v, 0.65) && even((u + v + 2.0) / 0.3),
        _ => r < 0.6 && v > 0.0,
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn group_look(spec: &SynthSpec, class: usize, group: usize) -> Look {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0x6c6f6f6b, class as u64, group as u64]));
    Look {
        dx: rng.random_range(-0.15..0.15),
        dy: rng.random_range(-0.15..0.15),
        scale: rng.random_range(0.85..1.1),
        angle: rng.random_range(-12.0..12.0),
        hue: rng.random_range(-25.0..25.0),
        value: rng.random_range(-0.08..0.08),
        stripe_angle: rng.random_range(0.0..PI),
    }
}

/// Renders sample `index` of `class`. Depends only on its arguments.
pub fn render(spec: &SynthSpec, class: usize, index: usize) -> RgbImage {
    let look = group_look(spec, class, index / spec.group_size);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, class as u64, index as u64]));
    let dx = look.dx + rng.random_range(-0.05..0.05);
    let dy = look.dy + rng.random_range(-0.05..0.05);
    let scale = look.scale * rng.random_range(0.97..1.03) * 0.6f64.powi((class / FAMILIES.len()) as i32);
    let angle = (look.angle + rng.random_range(-3.0..3.0)) * PI / 180.0;
    let (sin, cos) = angle.sin_cos();

    let (p, t) = (spec.palette_shift, spec.texture_shift);
    let hue_shift = p * 180.0 + look.hue;
    let contrast = 0.35 * (1.0 - 2.0 * p);
    let fg = hsv(30.0 + hue_shift, 0.6, 0.5 + look.value + contrast);
    let bg = hsv(220.0 + hue_shift, 0.6, 0.5 + look.value - contrast);
    let texture = 0.35 * t;
    let stripes = STRIPE_AMPLITUDE * t;
    let (ssin, scos) = look.stripe_angle.sin_cos();
    let sigma = 0.03 + 0.12 * t;

    let family = class % FAMILIES.len();
    let n = spec.image_size;
    let mut img = RgbImage::new(n, n);
    for y in 0..n {
        for x in 0..n {
            // 2×2 supersampling for soft edges
            let mut cover = 0.0;
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let px = (x as f64 + sx) / n as f64 * 2.0 - 1.0 - dx;
                let py = (y as f64 + sy) / n as f64 * 2.0 - 1.0 - dy;
                let u = (cos * px + sin * py) / scale;
                let v = (-sin * px + cos * py) / scale;
                if family_mask(family, u, v) {
                    cover += 0.25;
                }
            }
            let check = if (x / 2 + y / 2) % 2 == 0 { 1.0 } else { -1.0 };
            // period-4 stripes behind the shape
            let wave = (2.0 * PI * (x as f64 * scos + y as f64 * ssin) / 4.0).sin().signum();
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let noise: f64 = rng.sample(StandardNormal);
                let val = bg[c] + cover * (fg[c] - bg[c] + texture * check) + (1.0 - cover) * stripes * wave + sigma * noise;
                rgb[c] = (val * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            img.put(x, y, rgb);
        }
    }
    img
}

/// Writes `root/<class>/<class>_<index>.ppm` for every sample plus a
/// `groups.tsv` file assigning consecutive samples to shared groups.
pub fn synth_domain(spec: &SynthSpec, root: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    let names = spec.class_names();
    let mut groups = String::new();
    for (k, name) in names.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
        for i in 0..spec.samples_per_class {
            let file = format!("{name}_{i:05}.ppm");
            write_ppm(&dir.join(&file), &render(spec, k, i))?;
            groups += &format!("{name}/{file}\t{name}-g{:04}\n", i / spec.group_size);
        }
    }
    let gpath = root.join(GROUPS_FILE);
    fs::write(&gpath, groups).map_err(|e| DataError::io(&gpath, e))?;
    Ok(SynthSummary {
        root: root.to_path_buf(),
        class_names: names,
        counts: vec![spec.samples_per_class; spec.num_classes],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_rendering() {
        let spec = SynthSpec::new(4, 3, 0.8, 7);
        assert_eq!(render(&spec, 2, 1), render(&spec, 2, 1));
        assert_ne!(render(&spec, 2, 1), render(&spec, 2, 2));
    }

    #[test]
    fn validation() {
        assert!(SynthSpec::new(1, 3, 0.0, 0).validate().is_err());
        assert!(SynthSpec::new(2, 3, 1.5, 0).validate().is_err());
        assert!(SynthSpec::new(2, 3, 0.5, 0).validate().is_ok());
    }

    #[test]
    fn names_sort_in_class_order() {
        let names = SynthSpec::new(14, 1, 0.0, 0).class_names();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert_eq!(names[12], "c12_disk1");
    }

    #[test]
    fn every_family_covers_some_but_not_all_of_the_frame() {
        for f in 0..FAMILIES.len() {
            let mut hits = 0;
            for i in 0..40 {
                for j in 0..40 {
                    let (u, v) = (i as f64 / 20.0 - 1.0, j as f64 / 20.0 - 1.0);
                    hits += family_mask(f, u, v) as usize;
                }
            }
            assert!(hits > 100 && hits < 1400, "{} covers {hits}", FAMILIES[f]);
        }
    }

    #[test]
    fn palette_shift_flips_polarity() {
        let mean_luma = |shift: f64| {
            let spec = SynthSpec {
                texture_shift: 0.0,
                ..SynthSpec::new(2, 1, shift, 3)
            };
            let img = render(&spec, 0, 0);
            // disk center vs corner
            let c = img.pixel(16, 16).iter().map(|&v| v as i32).sum::<i32>();
            let e = img.pixel(0, 0).iter().map(|&v| v as i32).sum::<i32>();
            c - e
        };
        assert!(mean_luma(0.0) > 100);
        assert!(mean_luma(0.8) < -50);
    }
}
