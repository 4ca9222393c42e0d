//! Procedural multi-label shape images with pixel-exact ground truth.
//!
//! Every sample is a pure function of its seed: a ChaCha stream keyed by
//! `sample_seed(base, split, index)`, so splits can be generated in any order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WeakTrError};
use crate::graph::IGNORE_LABEL;
use crate::io::{read_tensor, write_tensor};
use crate::tensor::Tensor;

/// Square map of class ids; `0` is background, [`IGNORE_LABEL`] is ignored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub size: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(size: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != size * size {
            return Err(WeakTrError::shape(format!(
                "label map of side {size} needs {} labels, got {}",
                size * size,
                labels.len()
            )));
        }
        Ok(Self { size, labels })
    }

    pub fn filled(size: usize, label: u8) -> Self {
        Self {
            size,
            labels: vec![label; size * size],
        }
    }

    pub fn valid(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != IGNORE_LABEL).collect()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.size, self.size],
            self.labels.iter().map(|&l| l as f32).collect(),
        )
        .unwrap()
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [h, w] = *t.shape() else {
            return Err(WeakTrError::shape(format!("label map tensor {:?}", t.shape())));
        };
        if h != w {
            return Err(WeakTrError::shape(format!("label map {h}×{w} is not square")));
        }
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v <= 255.0 && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(WeakTrError::domain(format!("label value {v} is not a class id")))
                }
            })
            .collect::<Result<_>>()?;
        Self::new(h, labels)
    }

    pub fn hflip(&self) -> Self {
        let mut labels = self.labels.clone();
        for row in labels.chunks_mut(self.size) {
            row.reverse();
        }
        Self {
            size: self.size,
            labels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

pub const SHAPE_KINDS: [ShapeKind; 6] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Ring,
    ShapeKind::Cross,
    ShapeKind::Diamond,
];

impl ShapeKind {
    /// Whether `(dx, dy)` (offsets from the center, in units of the radius) is inside.
    fn contains(self, dx: f64, dy: f64) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= 1.0,
            ShapeKind::Square => dx.abs() <= 0.85 && dy.abs() <= 0.85,
            // Apex up, base at dy = 1.
            ShapeKind::Triangle => dy <= 1.0 && dy >= -1.0 && dx.abs() <= (dy + 1.0) / 2.0,
            ShapeKind::Ring => {
                let r2 = dx * dx + dy * dy;
                (0.3025..=1.0).contains(&r2)
            }
            ShapeKind::Cross => {
                (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0)
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= 1.0,
        }
    }

    fn base_color(self) -> [f64; 3] {
        match self {
            ShapeKind::Disk => [0.85, 0.2, 0.2],
            ShapeKind::Square => [0.2, 0.75, 0.25],
            ShapeKind::Triangle => [0.2, 0.3, 0.9],
            ShapeKind::Ring => [0.9, 0.8, 0.15],
            ShapeKind::Cross => [0.8, 0.25, 0.85],
            ShapeKind::Diamond => [0.15, 0.8, 0.85],
        }
    }
}

fn d_size() -> usize {
    64
}
fn d_classes() -> usize {
    4
}
fn d_min_shapes() -> usize {
    1
}
fn d_max_shapes() -> usize {
    3
}
fn d_min_scale() -> f64 {
    0.3
}
fn d_max_scale() -> f64 {
    0.5
}
fn d_noise() -> f64 {
    0.03
}
fn d_gradient() -> f64 {
    0.15
}
fn d_jitter() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default = "d_size")]
    pub image_size: usize,
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_min_shapes")]
    pub min_shapes: usize,
    #[serde(default = "d_max_shapes")]
    pub max_shapes: usize,
    /// Shape diameter as a fraction of the image side.
    #[serde(default = "d_min_scale")]
    pub min_scale: f64,
    #[serde(default = "d_max_scale")]
    pub max_scale: f64,
    #[serde(default = "d_noise")]
    pub noise_std: f64,
    /// Peak-to-peak amplitude of the linear background ramp.
    #[serde(default = "d_gradient")]
    pub background_gradient: f64,
    /// Per-channel jitter around each class's base color.
    #[serde(default = "d_jitter")]
    pub color_jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: d_size(),
            num_classes: d_classes(),
            min_shapes: d_min_shapes(),
            max_shapes: d_max_shapes(),
            min_scale: d_min_scale(),
            max_scale: d_max_scale(),
            noise_std: d_noise(),
            background_gradient: d_gradient(),
            color_jitter: d_jitter(),
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(WeakTrError::Config(m));
        if self.num_classes == 0 || self.num_classes > SHAPE_KINDS.len() {
            return fail(format!(
                "num_classes {} outside 1..={}",
                self.num_classes,
                SHAPE_KINDS.len()
            ));
        }
        if self.min_shapes > self.max_shapes {
            return fail("min_shapes exceeds max_shapes".into());
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale && self.max_scale < 1.0) {
            return fail("scale range must satisfy 0 < min <= max < 1".into());
        }
        if self.image_size < 8 || self.noise_std < 0.0 || self.background_gradient < 0.0 {
            return fail("image_size >= 8 and nonnegative noise/gradient required".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `O×O×3`, values in [0, 1].
    pub image: Tensor<f32>,
    /// Multi-hot over the `C` foreground classes.
    pub label: Vec<f32>,
    /// `0` = background, `c+1` = class `c`.
    pub gt_mask: LabelMap,
}

impl Sample {
    pub fn hflip(&self) -> Self {
        let o = self.gt_mask.size;
        let mut data = self.image.data().to_vec();
        for row in data.chunks_mut(o * 3) {
            for x in 0..o / 2 {
                for ch in 0..3 {
                    row.swap(x * 3 + ch, (o - 1 - x) * 3 + ch);
                }
            }
        }
        Self {
            image: Tensor::new(self.image.shape().to_vec(), data).unwrap(),
            label: self.label.clone(),
            gt_mask: self.gt_mask.hflip(),
        }
    }

    pub fn active_classes(&self) -> Vec<usize> {
        self.label
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .map(|(c, _)| c)
            .collect()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` of split `name`. Injective in `index` for a fixed split.
pub fn sample_seed(base_seed: u64, name: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(base_seed ^ h).wrapping_add(index))
}

struct Placed {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    r: f64,
}

const SUPERSAMPLE: usize = 4;

/// Fractional coverage of every pixel by one shape.
fn coverage(shape: &Placed, o: usize) -> Vec<f32> {
    let mut cov = vec![0f32; o * o];
    let y0 = (shape.cy - shape.r - 1.0).floor().max(0.0) as usize;
    let y1 = ((shape.cy + shape.r + 1.0).ceil() as usize).min(o);
    let x0 = (shape.cx - shape.r - 1.0).floor().max(0.0) as usize;
    let x1 = ((shape.cx + shape.r + 1.0).ceil() as usize).min(o);
    let step = 1.0 / SUPERSAMPLE as f64;
    let total = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    if shape
                        .kind
                        .contains((px - shape.cx) / shape.r, (py - shape.cy) / shape.r)
                    {
                        hits += 1;
                    }
                }
            }
            cov[y * o + x] = hits as f32 / total;
        }
    }
    cov
}

const MAX_PLACEMENT_ATTEMPTS: usize = 200;

/// Deterministic sample for `seed`.
pub fn generate_sample(seed: u64, cfg: &DataConfig) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let o = cfg.image_size;
    let c = cfg.num_classes;
    let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes).min(c);
    let classes: Vec<usize> = sample_indices(&mut rng, c, count).into_vec();

    // Background ramp between two muted colors along a random direction.
    let mut base = [0f64; 3];
    let mut tilt = [0f64; 3];
    for ch in 0..3 {
        base[ch] = rng.gen_range(0.35..0.6);
        tilt[ch] = rng.gen_range(-1.0..1.0) * cfg.background_gradient / 2.0;
    }
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dirx, diry) = (angle.cos(), angle.sin());

    let min_pixels = (0.01 * (o * o) as f64).ceil() as usize;
    let max_pixels = (0.40 * (o * o) as f64).floor() as usize;
    let mut chosen: Option<(Vec<Placed>, Vec<Vec<f32>>, Vec<u8>)> = None;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let placed: Vec<Placed> = classes
            .iter()
            .map(|&k| {
                let scale = rng.gen_range(cfg.min_scale..=cfg.max_scale);
                let r = scale * o as f64 / 2.0;
                Placed {
                    kind: SHAPE_KINDS[k],
                    cx: rng.gen_range(r..=(o as f64 - r)),
                    cy: rng.gen_range(r..=(o as f64 - r)),
                    r,
                }
            })
            .collect();
        let covs: Vec<Vec<f32>> = placed.iter().map(|p| coverage(p, o)).collect();
        let mut mask = vec![0u8; o * o];
        for (&k, cov) in classes.iter().zip(&covs) {
            for (m, &v) in mask.iter_mut().zip(cov) {
                if v >= 0.5 {
                    *m = k as u8 + 1;
                }
            }
        }
        let ok = classes.iter().zip(&covs).all(|(&k, cov)| {
            let full = cov.iter().filter(|&&v| v >= 0.5).count();
            let visible = mask.iter().filter(|&&m| m == k as u8 + 1).count();
            visible >= min_pixels && full <= max_pixels
        });
        if ok {
            chosen = Some((placed, covs, mask));
            break;
        }
    }
    let (placed, covs, mask) = chosen.ok_or_else(|| {
        WeakTrError::Config(format!(
            "could not place {count} shapes within coverage bounds for seed {seed}"
        ))
    })?;

    let colors: Vec<[f64; 3]> = placed
        .iter()
        .map(|p| {
            let b = p.kind.base_color();
            let mut col = [0.0; 3];
            for ch in 0..3 {
                col[ch] = (b[ch] + rng.gen_range(-1.0..=1.0) * cfg.color_jitter).clamp(0.0, 1.0);
            }
            col
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut image = Vec::with_capacity(o * o * 3);
    for y in 0..o {
        for x in 0..o {
            let t = ((x as f64 + 0.5) / o as f64 - 0.5) * dirx + ((y as f64 + 0.5) / o as f64 - 0.5) * diry;
            let mut px = [0f64; 3];
            for ch in 0..3 {
                px[ch] = base[ch] + 2.0 * t * tilt[ch];
            }
            for (cov, col) in covs.iter().zip(&colors) {
                let a = cov[y * o + x] as f64;
                if a > 0.0 {
                    for ch in 0..3 {
                        px[ch] = px[ch] * (1.0 - a) + col[ch] * a;
                    }
                }
            }
            for v in px {
                let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image.push((v + n).clamp(0.0, 1.0) as f32);
            }
        }
    }

    let mut label = vec![0f32; c];
    for &k in &classes {
        label[k] = 1.0;
    }
    Ok(Sample {
        image: Tensor::new(vec![o, o, 3], image)?,
        label,
        gt_mask: LabelMap::new(o, mask)?,
    })
}

/// `count` samples of split `name`; sample `i` uses `sample_seed(base_seed, name, i)`.
pub fn generate_split(name: &str, count: usize, base_seed: u64, cfg: &DataConfig) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| generate_sample(sample_seed(base_seed, name, i as u64), cfg))
        .collect()
}

/// `config.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub split: String,
    pub count: usize,
    pub base_seed: u64,
    pub data: DataConfig,
}

pub fn sample_file(index: usize) -> String {
    format!("{index:04}.wtt")
}

/// Writes `images/`, `masks/`, `labels.csv` and `config.json` under `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, meta: &DatasetMeta, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let c = meta.data.num_classes;
    let mut csv = String::from("index");
    for k in 0..c {
        write!(csv, ",c{k}").unwrap();
    }
    csv.push('\n');
    for (i, s) in samples.iter().enumerate() {
        write_tensor(dir.join("images").join(sample_file(i)), &s.image)?;
        write_tensor(dir.join("masks").join(sample_file(i)), &s.gt_mask.to_tensor())?;
        write!(csv, "{i}").unwrap();
        for &v in &s.label {
            write!(csv, ",{}", v as u8).unwrap();
        }
        csv.push('\n');
    }
    fs::write(dir.join("labels.csv"), csv)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetMeta, Vec<Sample>)> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    let csv_path = dir.join("labels.csv");
    let csv = fs::read_to_string(&csv_path)?;
    let bad = |reason: String| WeakTrError::Format {
        path: csv_path.clone(),
        reason,
    };
    let mut samples = Vec::new();
    for (line_no, line) in csv.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let index: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| bad(format!("line {}: bad index", line_no + 1)))?;
        let label: Vec<f32> = fields
            .map(|f| match f.trim() {
                "0" => Ok(0.0),
                "1" => Ok(1.0),
                other => Err(bad(format!("line {}: label value {other}", line_no + 1))),
            })
            .collect::<Result<_>>()?;
        if label.len() != meta.data.num_classes {
            return Err(bad(format!("line {}: {} label columns", line_no + 1, label.len())));
        }
        let image = read_tensor(dir.join("images").join(sample_file(index)))?;
        let gt_mask = LabelMap::from_tensor(&read_tensor(dir.join("masks").join(sample_file(index)))?)?;
        samples.push(Sample {
            image,
            label,
            gt_mask,
        });
    }
    Ok((meta, samples))
}
