//! Synthetic dental-arch scenes and their on-disk dataset layout.
//!
//! Sixteen elliptical teeth sit along a parabolic arch, left to right in the
//! order `T8 … T1 | T9 … T16`. Tooth intensities differ only slightly, so a
//! tooth's identity has to be read from its place on the arch.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::apk::TEETH;
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::tensor::Tensor;

/// Per-pixel class IDs: 0 background, 1..=16 teeth T1..T16.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::dim("label_map", &[h, w], &[data.len()]));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.w + col]
    }

    /// `present[k]` is true when tooth `k + 1` occupies at least one pixel.
    pub fn present(&self) -> [bool; TEETH] {
        let mut p = [false; TEETH];
        for &l in &self.data {
            if (1..=TEETH as u8).contains(&l) {
                p[l as usize - 1] = true;
            }
        }
        p
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.data.iter().map(|&l| l as f32).collect();
        Tensor::new([self.h, self.w], data).expect("extents match")
    }

    pub fn from_tensor(t: &Tensor<f32>, path: &Path) -> Result<Self> {
        let [h, w] = t.shape()[..] else {
            return Err(Error::Data(format!("{}: label tensor must be rank 2, got {:?}", path.display(), t.shape())));
        };
        let mut data = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v.fract() != 0.0 || !(0.0..=TEETH as f32).contains(&v) {
                return Err(Error::Data(format!("{}: label value {v} is not a class ID", path.display())));
            }
            data.push(v as u8);
        }
        LabelMap::new(h, w, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    /// `[H, W, C]` intensities in `[0, 1]`.
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    pub present: [bool; TEETH],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row of the arch apex, as a fraction of the height.
    pub apex: f64,
    /// Horizontal half-span of the arch, fraction of the width.
    pub arch_half_width: [f64; 2],
    /// Vertical drop from apex to the arch ends, fraction of the height.
    pub arch_depth: [f64; 2],
    /// Tooth length along the arch relative to its slot.
    pub tooth_fill: [f64; 2],
    /// Cross-arch to along-arch axis ratio.
    pub eccentricity: [f64; 2],
    /// Probability that any one tooth is missing.
    pub dropout: f64,
    /// Uniform center jitter, in units of the tooth's along-arch semi-axis.
    pub crowding: f64,
    /// Gaussian pixel noise standard deviation.
    pub noise: f64,
    /// Tooth numbers (1..=16) never rendered.
    pub always_missing: Vec<u8>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            channels: 1,
            apex: 0.14,
            arch_half_width: [0.28, 0.35],
            arch_depth: [0.50, 0.66],
            tooth_fill: [1.0, 1.15],
            eccentricity: [1.1, 1.5],
            dropout: 0.05,
            crowding: 0.15,
            noise: 0.05,
            always_missing: Vec::new(),
            seed: 0,
        }
    }
}

/// Relative along-arch size of the `k`-th tooth from the midline (0-based).
fn tooth_weight(k: usize) -> f64 {
    0.75 + 0.5 * k as f64 / 7.0
}

struct Arch {
    apex: f64,
    half_width: f64,
    depth: f64,
}

impl Arch {
    /// Point and unit tangent at horizontal offset `u >= 0` from the midline.
    fn at(&self, u: f64) -> ((f64, f64), (f64, f64)) {
        let a = self.depth / (self.half_width * self.half_width);
        let v = self.apex + a * u * u;
        let (tu, tv) = (1.0f64, 2.0 * a * u);
        let n = tu.hypot(tv);
        ((u, v), (tu / n, tv / n))
    }

    /// Horizontal offsets whose arc lengths from the midline are `targets`.
    fn offsets_at_lengths(&self, targets: &[f64]) -> Vec<f64> {
        const STEPS: usize = 4096;
        let a = self.depth / (self.half_width * self.half_width);
        let du = self.half_width / STEPS as f64;
        let mut out = Vec::with_capacity(targets.len());
        let (mut u, mut s) = (0.0, 0.0);
        for &t in targets {
            while s < t && u < self.half_width {
                let mid = u + du / 2.0;
                s += du * (1.0 + (2.0 * a * mid).powi(2)).sqrt();
                u += du;
            }
            out.push(u);
        }
        out
    }

    fn half_length(&self) -> f64 {
        let a = self.depth / (self.half_width * self.half_width);
        let x = 2.0 * a * self.half_width;
        (x * (1.0 + x * x).sqrt() + x.asinh()) / (4.0 * a)
    }
}

#[derive(Clone, Copy, Debug)]
struct Tooth {
    /// 0-based tooth index (T1 = 0).
    index: usize,
    /// Slot counted from the midline, 0-based.
    slot: usize,
    cu: f64,
    cv: f64,
    tu: f64,
    tv: f64,
    a: f64,
    b: f64,
}

impl Tooth {
    fn rho(&self, u: f64, v: f64) -> f64 {
        let (du, dv) = (u - self.cu, v - self.cv);
        let along = du * self.tu + dv * self.tv;
        let across = dv * self.tu - du * self.tv;
        (along / self.a).powi(2) + (across / self.b).powi(2)
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return fail("scene extents must be positive".into());
        }
        for (name, p) in [("dropout", self.dropout)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must be a probability, got {p}"));
            }
        }
        for (name, r) in [
            ("arch_half_width", self.arch_half_width),
            ("arch_depth", self.arch_depth),
            ("tooth_fill", self.tooth_fill),
            ("eccentricity", self.eccentricity),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return fail(format!("{name} must be a positive range, got {r:?}"));
            }
        }
        if self.crowding < 0.0 || self.noise < 0.0 || !(0.0..1.0).contains(&self.apex) {
            return fail("crowding and noise must be non-negative, apex in [0, 1)".into());
        }
        if let Some(bad) = self.always_missing.iter().find(|&&t| !(1..=TEETH as u8).contains(&t)) {
            return fail(format!("always_missing entry {bad} is not a tooth number"));
        }
        // Largest arch and teeth must stay on the canvas.
        let (h, w) = (self.height as f64, self.width as f64);
        let arch = Arch {
            apex: self.apex * h,
            half_width: self.arch_half_width[1] * w,
            depth: self.arch_depth[1] * h,
        };
        let slot = arch.half_length() / (0..8).map(tooth_weight).sum::<f64>();
        let a = slot * tooth_weight(7) / 2.0 * self.tooth_fill[1];
        let reach = a * (self.eccentricity[1].max(1.0) + self.crowding * std::f64::consts::SQRT_2);
        let (top, bottom) = (arch.apex - reach, arch.apex + arch.depth + reach);
        if top < 0.0 || bottom > h || arch.half_width + reach > w / 2.0 {
            return fail(format!(
                "arch does not fit the {}x{} canvas (needs rows {top:.1}..{bottom:.1}, half-width {:.1})",
                self.height,
                self.width,
                arch.half_width + reach
            ));
        }
        Ok(())
    }

    pub fn scene_seed(&self, split: &str, index: usize) -> u64 {
        let salt = split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        splitmix64(splitmix64(self.seed ^ salt) ^ index as u64)
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Renders one scene from its own seed.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<LabeledScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (cfg.height as f64, cfg.width as f64);
    let arch = Arch {
        apex: cfg.apex * hf,
        half_width: sample(&mut rng, cfg.arch_half_width) * wf,
        depth: sample(&mut rng, cfg.arch_depth) * hf,
    };
    let fill = sample(&mut rng, cfg.tooth_fill);
    let ecc = sample(&mut rng, cfg.eccentricity);

    let weights: Vec<f64> = (0..8).map(tooth_weight).collect();
    let slot = arch.half_length() / weights.iter().sum::<f64>();
    let mut acc = 0.0;
    let centers: Vec<f64> = weights
        .iter()
        .map(|w| {
            let c = acc + w * slot / 2.0;
            acc += w * slot;
            c
        })
        .collect();
    let offsets = arch.offsets_at_lengths(&centers);

    let mut teeth = Vec::with_capacity(TEETH);
    for (slot_k, &u) in offsets.iter().enumerate() {
        let ((cu, cv), (tu, tv)) = arch.at(u);
        let a = weights[slot_k] * slot / 2.0 * fill;
        let b = a * ecc;
        // Left half holds T(slot+1); the mirror on the right holds T(slot+9).
        for (index, cu, tu) in [(slot_k, -cu, tu), (slot_k + 8, cu, -tu)] {
            let dropped = rng.random::<f64>() < cfg.dropout;
            let jitter_u = rng.random_range(-1.0..=1.0) * cfg.crowding * a;
            let jitter_v = rng.random_range(-1.0..=1.0) * cfg.crowding * a;
            if dropped || cfg.always_missing.contains(&(index as u8 + 1)) {
                continue;
            }
            teeth.push(Tooth {
                index,
                slot: slot_k,
                cu: cu + jitter_u,
                cv: cv + jitter_v,
                tu,
                tv,
                a,
                b,
            });
        }
    }

    let background = 0.15 + rng.random_range(-0.03..0.03);
    let enamel = 0.68 + rng.random_range(-0.04..0.04);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut labels = vec![0u8; h * w];
    let mut image = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let v = y as f64 + 0.5;
        for x in 0..w {
            let u = x as f64 + 0.5 - wf / 2.0;
            let mut best: Option<(f64, usize, &Tooth)> = None;
            for t in &teeth {
                let r = t.rho(u, v);
                if r > 1.0 {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((br, bs, _)) => r < br || (r == br && t.slot < bs),
                };
                if better {
                    best = Some((r, t.slot, t));
                }
            }
            let base = match best {
                Some((r, _, t)) => {
                    labels[y * w + x] = t.index as u8 + 1;
                    // Within 10% of the range across classes, shaded toward the rim.
                    enamel + 0.1 * t.slot as f64 / 7.0 - 0.12 * r
                }
                None => background,
            };
            for _ in 0..c {
                let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image.push((base + n).clamp(0.0, 1.0) as f32);
            }
        }
    }
    let labels = LabelMap::new(h, w, labels)?;
    Ok(LabeledScene {
        image: Tensor::new([h, w, c], image)?,
        present: labels.present(),
        labels,
    })
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Scene counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 2000,
            val: 200,
            test: 200,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }
}

pub fn generate_split(cfg: &SceneConfig, split: &str, count: usize) -> Result<Vec<LabeledScene>> {
    (0..count).map(|i| generate_scene(cfg, cfg.scene_seed(split, i))).collect()
}

fn scene_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    let name = format!("{index:04}.tsr");
    (dir.join("images").join(&name), dir.join("labels").join(&name))
}

/// Writes `scenes` as `dir/images/NNNN.tsr` and `dir/labels/NNNN.tsr`.
pub fn write_split(dir: &Path, scenes: &[LabeledScene]) -> Result<()> {
    for sub in ["images", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, s) in scenes.iter().enumerate() {
        let (img, lab) = scene_paths(dir, i);
        write_tensor(&img, &s.image)?;
        write_tensor(&lab, &s.labels.to_tensor())?;
    }
    Ok(())
}

pub fn read_split(dir: &Path, count: usize) -> Result<Vec<LabeledScene>> {
    (0..count)
        .map(|i| {
            let (img, lab) = scene_paths(dir, i);
            if !img.exists() {
                return Err(Error::Data(format!("missing scene file {}", img.display())));
            }
            let image: Tensor<f32> = read_tensor(&img)?;
            let labels = LabelMap::from_tensor(&read_tensor(&lab)?, &lab)?;
            let shape = image.shape();
            if shape.len() != 3 || shape[0] != labels.h() || shape[1] != labels.w() {
                return Err(Error::Data(format!(
                    "scene {i}: image {:?} and labels {}x{} disagree",
                    shape,
                    labels.h(),
                    labels.w()
                )));
            }
            Ok(LabeledScene {
                image,
                present: labels.present(),
                labels,
            })
        })
        .collect()
}

const MANIFEST: &str = "manifest.txt";

/// Writes all three splits plus `manifest.txt` with the counts and the
/// generator settings.
pub fn write_dataset(dir: &Path, cfg: &SceneConfig, sizes: SplitSizes) -> Result<()> {
    cfg.validate()?;
    let mut manifest = String::from("# teethseg synthetic dataset\n");
    for split in SPLITS {
        let scenes = generate_split(cfg, split, sizes.get(split))?;
        write_split(&dir.join(split), &scenes)?;
        manifest.push_str(&format!("split {split} {}\n", scenes.len()));
    }
    let settings = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    for line in settings.lines() {
        manifest.push_str(&format!("scene {line}\n"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Split counts recorded in a dataset manifest.
pub fn read_manifest(dir: &Path) -> Result<SplitSizes> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::Data(format!("no dataset manifest at {}", path.display())))?;
    let mut sizes = SplitSizes { train: 0, val: 0, test: 0 };
    let mut offset = 0u64;
    for line in text.lines() {
        let here = offset;
        offset += line.len() as u64 + 1;
        let mut f = line.split_whitespace();
        if f.next() != Some("split") {
            continue;
        }
        let bad = || Error::Format {
            path: path.clone(),
            offset: here,
            msg: format!("bad split line {line:?}"),
        };
        let name = f.next().ok_or_else(bad)?;
        let n: usize = f.next().and_then(|n| n.parse().ok()).ok_or_else(bad)?;
        match name {
            "train" => sizes.train = n,
            "val" => sizes.val = n,
            "test" => sizes.test = n,
            _ => return Err(bad()),
        }
    }
    Ok(sizes)
}

pub fn read_dataset_split(dir: &Path, split: &str) -> Result<Vec<LabeledScene>> {
    let sizes = read_manifest(dir)?;
    read_split(&dir.join(split), sizes.get(split))
}

/// Fraction of scenes in which each tooth appears.
pub fn presence_rates(scenes: &[LabeledScene]) -> [f64; TEETH] {
    let mut counts = [0usize; TEETH];
    for s in scenes {
        for (c, &p) in counts.iter_mut().zip(&s.present) {
            *c += p as usize;
        }
    }
    counts.map(|c| c as f64 / scenes.len().max(1) as f64)
}
