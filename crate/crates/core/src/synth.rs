//! Synthetic zero-shot dataset.
//!
//! Every class is an attribute vector that fully determines a two-part
//! object: a solid superellipse "head" (disk to square) and a striped
//! trapezoid "tail" (bar to triangle), each with its own color and size,
//! plus the direction from head to tail. Unseen classes are convex
//! combinations of two seen classes with a little noise, so they lie near
//! the span of the seen semantics. Images are rendered on a dark noisy
//! background with a random global translation and small per-part jitter;
//! tight square boxes around each part are kept as ground truth.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use zsl_tensor::{read_tensor, seeded_rng, write_tensor, Rng, Tensor};

use crate::error::{Error, Result};
use crate::metrics::SquareBox;

/// Attributes per part: red, green, blue, size, shape.
pub const PART_ATTRIBUTES: usize = 5;
pub const MAX_PARTS: usize = 2;
pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

fn d_classes() -> usize {
    20
}
fn d_unseen() -> usize {
    5
}
fn d_per_class() -> usize {
    60
}
fn d_size() -> usize {
    32
}
fn d_parts() -> usize {
    2
}
fn d_noise() -> f64 {
    0.05
}
fn d_val() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_unseen")]
    pub num_unseen: usize,
    #[serde(default = "d_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "d_size")]
    pub image_size: usize,
    #[serde(default = "d_parts")]
    pub num_parts: usize,
    #[serde(default = "d_noise")]
    pub noise_level: f64,
    /// Fraction of each seen class held out for validation, and the same
    /// fraction again for the seen test split.
    #[serde(default = "d_val")]
    pub holdout_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: d_classes(),
            num_unseen: d_unseen(),
            samples_per_class: d_per_class(),
            image_size: d_size(),
            num_parts: d_parts(),
            noise_level: d_noise(),
            holdout_fraction: d_val(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn semantic_dim(&self) -> usize {
        PART_ATTRIBUTES * self.num_parts + 1
    }

    pub fn num_seen(&self) -> usize {
        self.num_classes - self.num_unseen
    }

    /// Per seen class: (train, val, test_seen) sample counts.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let hold = ((self.samples_per_class as f64 * self.holdout_fraction).round() as usize).max(1);
        (self.samples_per_class - 2 * hold, hold, hold)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_unseen == 0 || self.num_unseen >= self.num_classes {
            return Err(Error::config(format!(
                "num_unseen ({}) must be at least 1 and below num_classes ({})",
                self.num_unseen, self.num_classes
            )));
        }
        if self.num_seen() < 2 {
            return Err(Error::config("at least two seen classes are required"));
        }
        if self.num_parts == 0 || self.num_parts > MAX_PARTS {
            return Err(Error::config(format!(
                "num_parts must be 1..={MAX_PARTS}, got {}",
                self.num_parts
            )));
        }
        if self.image_size < 16 {
            return Err(Error::config(format!(
                "image_size {} is too small; at least 16 is required",
                self.image_size
            )));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::config("noise_level must be >= 0"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 0.5) {
            return Err(Error::config("holdout_fraction must lie in (0, 0.5)"));
        }
        let (train, _, _) = self.split_counts();
        if self.samples_per_class < 3 || train == 0 {
            return Err(Error::config(format!(
                "{} samples per class leave no training samples",
                self.samples_per_class
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    /// Superellipse from disk (shape 0) to square (shape 1).
    Blob,
    /// Striped trapezoid from bar (shape 0) to triangle (shape 1).
    StripedTrapezoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartRecipe {
    pub primitive: Primitive,
    pub color: [f64; 3],
    /// Side of the part's bounding square as a fraction of the image.
    pub size: f64,
    pub shape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClassSpec {
    pub id: usize,
    pub name: String,
    pub seen: bool,
    pub attributes: Vec<f64>,
}

/// Distance between part centers in Chebyshev norm, as a fraction of the image.
pub const PART_SPACING: f64 = 0.38;

/// Heads take warm colors and tails cool ones, each channel monotone in its
/// attribute.
fn part_color(part: usize, a: [f64; 3]) -> [f64; 3] {
    if part == 0 {
        [0.6 + 0.4 * a[0], 0.1 + 0.4 * a[1], 0.05 + 0.25 * a[2]]
    } else {
        [0.05 + 0.25 * a[0], 0.1 + 0.4 * a[1], 0.6 + 0.4 * a[2]]
    }
}

impl SynthClassSpec {
    pub fn recipes(&self, num_parts: usize) -> Vec<PartRecipe> {
        (0..num_parts)
            .map(|p| {
                let a = &self.attributes[p * PART_ATTRIBUTES..(p + 1) * PART_ATTRIBUTES];
                PartRecipe {
                    primitive: if p == 0 {
                        Primitive::Blob
                    } else {
                        Primitive::StripedTrapezoid
                    },
                    color: part_color(p, [a[0], a[1], a[2]]),
                    size: 0.2 + 0.1 * a[3],
                    shape: a[4],
                }
            })
            .collect()
    }

    /// Unit step (Chebyshev norm 1) from the head to the tail.
    pub fn layout_direction(&self) -> (f64, f64) {
        let theta = 2.0 * PI * self.attributes[self.attributes.len() - 1];
        let (dx, dy) = (theta.cos(), theta.sin());
        let m = dx.abs().max(dy.abs());
        (dx / m, dy / m)
    }

    /// Recipe parameters as one vector: per part color, size, shape, then
    /// the head-to-tail offset, all in image fractions.
    pub fn recipe_vector(&self, num_parts: usize) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .recipes(num_parts)
            .iter()
            .flat_map(|r| [r.color[0], r.color[1], r.color[2], r.size, r.shape])
            .collect();
        let (dx, dy) = self.layout_direction();
        v.extend([dx * PART_SPACING, dy * PART_SPACING]);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// [3,S,S] in [0,1]
    pub image: Tensor,
    pub label: usize,
    pub boxes: Vec<SquareBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: String,
    /// [N,3,S,S]
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub boxes: Vec<Vec<SquareBox>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images of the given sample indices, [B,3,S,S].
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(&[idx.len(), s[1], s[2], s[3]], data).expect("batch shape")
    }

    fn from_samples(name: &str, samples: Vec<SynthSample>, size: usize) -> Result<Split> {
        if samples.is_empty() {
            return Err(Error::data(format!("split '{name}' would be empty")));
        }
        let mut data = Vec::with_capacity(samples.len() * 3 * size * size);
        let mut labels = Vec::new();
        let mut boxes = Vec::new();
        for s in samples {
            data.extend(s.image.into_data());
            labels.push(s.label);
            boxes.push(s.boxes);
        }
        Ok(Split {
            name: name.to_string(),
            images: Tensor::new(&[labels.len(), 3, size, size], data)?,
            labels,
            boxes,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZslDataset {
    pub config: SynthConfig,
    /// Seen classes first, then unseen; `classes[i].id == i`.
    pub classes: Vec<SynthClassSpec>,
    pub train: Split,
    pub val: Split,
    pub test_seen: Split,
    pub test_unseen: Split,
}

impl ZslDataset {
    pub fn seen(&self) -> Vec<usize> {
        self.classes.iter().filter(|c| c.seen).map(|c| c.id).collect()
    }

    pub fn unseen(&self) -> Vec<usize> {
        self.classes.iter().filter(|c| !c.seen).map(|c| c.id).collect()
    }

    /// All class attribute vectors, [K, d].
    pub fn semantics(&self) -> Tensor {
        let d = self.classes[0].attributes.len();
        let data = self.classes.iter().flat_map(|c| c.attributes.clone()).collect();
        Tensor::new(&[self.classes.len(), d], data).expect("attribute rows share a length")
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test_seen" => Ok(&self.test_seen),
            "test_unseen" => Ok(&self.test_unseen),
            other => Err(Error::data(format!("unknown split '{other}'"))),
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum attribute distance kept between any two classes.
const MIN_CLASS_DISTANCE: f64 = 0.35;
const MAX_DRAWS: usize = 10_000;

fn class_specs(cfg: &SynthConfig, rng: &mut Rng) -> Result<Vec<SynthClassSpec>> {
    let d = cfg.semantic_dim();
    let mut attrs: Vec<Vec<f64>> = Vec::new();
    let far_enough = |a: &[f64], attrs: &[Vec<f64>]| attrs.iter().all(|b| distance(a, b) >= MIN_CLASS_DISTANCE);
    let mut draws = 0;
    while attrs.len() < cfg.num_seen() {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(Error::data("could not draw distinct seen classes"));
        }
        let a: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
        if far_enough(&a, &attrs) {
            attrs.push(a);
        }
    }
    let seen = attrs.len();
    while attrs.len() < cfg.num_classes {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(Error::data("could not draw distinct unseen classes"));
        }
        let i = rng.gen_range(0..seen);
        let mut j = rng.gen_range(0..seen - 1);
        if j >= i {
            j += 1;
        }
        let w = rng.gen_range(0.3..0.7);
        let a: Vec<f64> = (0..d)
            .map(|k| {
                let noise: f64 = rng.sample(rand_distr::StandardNormal);
                (w * attrs[i][k] + (1.0 - w) * attrs[j][k] + 0.02 * noise).clamp(0.0, 1.0)
            })
            .collect();
        if far_enough(&a, &attrs) {
            attrs.push(a);
        }
    }
    Ok(attrs
        .into_iter()
        .enumerate()
        .map(|(id, attributes)| SynthClassSpec {
            id,
            name: format!("class{id:02}"),
            seen: id < seen,
            attributes,
        })
        .collect())
}

/// Fraction of a pixel covered by a shape, from a 2×2 grid of sub-samples.
fn coverage(inside: impl Fn(f64, f64) -> bool, px: usize, py: usize) -> f64 {
    let mut c = 0.0;
    for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
        if inside(px as f64 + ox, py as f64 + oy) {
            c += 0.25;
        }
    }
    c
}

fn paint(image: &mut [f64], size: usize, part: &PartRecipe, cx: f64, cy: f64, side: f64) {
    let half = side / 2.0;
    let x0 = (cx - half).floor().max(0.0) as usize;
    let y0 = (cy - half).floor().max(0.0) as usize;
    let x1 = ((cx + half).ceil() as usize).min(size);
    let y1 = ((cy + half).ceil() as usize).min(size);
    let exponent = 2.0 + 8.0 * part.shape;
    for py in y0..y1 {
        for px in x0..x1 {
            let cov = match part.primitive {
                Primitive::Blob => coverage(
                    |x, y| ((x - cx).abs() / half).powf(exponent) + ((y - cy).abs() / half).powf(exponent) <= 1.0,
                    px,
                    py,
                ),
                Primitive::StripedTrapezoid => coverage(
                    |x, y| {
                        let t = (y - (cy - half)) / side;
                        let w = half * (1.0 - 0.9 * part.shape * (1.0 - t));
                        (0.0..=1.0).contains(&t) && (x - cx).abs() <= w
                    },
                    px,
                    py,
                ),
            };
            if cov == 0.0 {
                continue;
            }
            let shade = match part.primitive {
                Primitive::Blob => 1.0,
                Primitive::StripedTrapezoid => {
                    if ((py as f64 + 0.5 - (cy - half)) / 2.0).floor() as i64 % 2 == 0 {
                        1.0
                    } else {
                        0.6
                    }
                }
            };
            for c in 0..3 {
                let i = (c * size + py) * size + px;
                image[i] = (1.0 - cov) * image[i] + cov * part.color[c] * shade;
            }
        }
    }
}

/// Renders one sample of `class` from its own seeded generator.
pub fn render_sample(cfg: &SynthConfig, class: &SynthClassSpec, rng: &mut Rng) -> Result<SynthSample> {
    let size = cfg.image_size;
    let s = size as f64;
    let recipes = class.recipes(cfg.num_parts);
    let sides: Vec<f64> = recipes
        .iter()
        .map(|r| (r.size * s * rng.gen_range(0.95..1.05)).round().max(3.0))
        .collect();
    let (dx, dy) = class.layout_direction();
    let spacing = PART_SPACING * s;
    // centers relative to the layout midpoint
    let mut rel: Vec<(f64, f64)> = if cfg.num_parts == 1 {
        vec![(0.0, 0.0)]
    } else {
        vec![(-dx * spacing / 2.0, -dy * spacing / 2.0), (dx * spacing / 2.0, dy * spacing / 2.0)]
    };
    for r in rel.iter_mut() {
        r.0 += rng.gen_range(-1.0..1.0);
        r.1 += rng.gen_range(-1.0..1.0);
    }
    // range of midpoints keeping every part one pixel inside the image
    let mut lo = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut hi = (f64::INFINITY, f64::INFINITY);
    for (r, side) in rel.iter().zip(&sides) {
        lo.0 = lo.0.max(1.0 + side / 2.0 - r.0);
        lo.1 = lo.1.max(1.0 + side / 2.0 - r.1);
        hi.0 = hi.0.min(s - 1.0 - side / 2.0 - r.0);
        hi.1 = hi.1.min(s - 1.0 - side / 2.0 - r.1);
    }
    if lo.0 > hi.0 || lo.1 > hi.1 {
        return Err(Error::data(format!(
            "parts of {} cannot fit in a {size}px image",
            class.name
        )));
    }
    let mx = if hi.0 > lo.0 { rng.gen_range(lo.0..hi.0) } else { lo.0 };
    let my = if hi.1 > lo.1 { rng.gen_range(lo.1..hi.1) } else { lo.1 };

    let mut image = vec![0.0; 3 * size * size];
    for v in image.iter_mut() {
        let n: f64 = rng.sample(rand_distr::StandardNormal);
        *v = 0.08 + 0.02 * n;
    }
    let mut boxes = Vec::new();
    for ((recipe, r), &side) in recipes.iter().zip(&rel).zip(&sides) {
        // snap the box to the pixel grid so it bounds the painted pixels
        let cx = ((mx + r.0 - side / 2.0).round()) + side / 2.0;
        let cy = ((my + r.1 - side / 2.0).round()) + side / 2.0;
        paint(&mut image, size, recipe, cx, cy, side);
        boxes.push(SquareBox::new(cx, cy, side));
    }
    for v in image.iter_mut() {
        let n: f64 = rng.sample(rand_distr::StandardNormal);
        *v = (*v + cfg.noise_level * n).clamp(0.0, 1.0);
    }
    Ok(SynthSample {
        image: Tensor::new(&[3, size, size], image)?,
        label: class.id,
        boxes,
    })
}

pub fn generate(cfg: &SynthConfig) -> Result<ZslDataset> {
    cfg.validate()?;
    let mut rng = seeded_rng(mix_seed(cfg.seed, u64::MAX));
    let classes = class_specs(cfg, &mut rng)?;
    let (n_train, n_val, _) = cfg.split_counts();
    let (mut train, mut val, mut test_seen, mut test_unseen) = (vec![], vec![], vec![], vec![]);
    for class in &classes {
        for i in 0..cfg.samples_per_class {
            let index = (class.id * cfg.samples_per_class + i) as u64;
            let mut srng = seeded_rng(mix_seed(cfg.seed, index));
            let sample = render_sample(cfg, class, &mut srng)?;
            if !class.seen {
                test_unseen.push(sample);
            } else if i < n_train {
                train.push(sample);
            } else if i < n_train + n_val {
                val.push(sample);
            } else {
                test_seen.push(sample);
            }
        }
    }
    let s = cfg.image_size;
    Ok(ZslDataset {
        config: cfg.clone(),
        classes,
        train: Split::from_samples("train", train, s)?,
        val: Split::from_samples("val", val, s)?,
        test_seen: Split::from_samples("test_seen", test_seen, s)?,
        test_unseen: Split::from_samples("test_unseen", test_unseen, s)?,
    })
}

/// Uniformly placed square of `side` fully inside the image.
pub fn random_box_with(image_size: usize, side: f64, rng: &mut Rng) -> SquareBox {
    let s = image_size as f64;
    let side = side.min(s);
    let span = s - side;
    let (x, y) = if span > 0.0 {
        (rng.gen_range(0.0..span), rng.gen_range(0.0..span))
    } else {
        (0.0, 0.0)
    };
    SquareBox::new(x + side / 2.0, y + side / 2.0, side)
}

pub fn random_box(image_size: usize, side: f64, seed: u64) -> SquareBox {
    random_box_with(image_size, side, &mut seeded_rng(seed))
}

/// Binary PPM of an image [3,S,S] with values clamped to [0,1].
pub fn image_ppm(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for c in 0..3 {
            bytes.push((image.data()[c * h * w + p].clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8);
        }
    }
    bytes
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitManifest {
    name: String,
    images: String,
    labels: Vec<usize>,
    boxes: Vec<Vec<SquareBox>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: SynthConfig,
    semantic_dim: usize,
    classes: Vec<SynthClassSpec>,
    semantics: String,
    splits: Vec<SplitManifest>,
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(ds: &ZslDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    for split in [&ds.train, &ds.val, &ds.test_seen, &ds.test_unseen] {
        let file = format!("{}_images.sgmt", split.name);
        let mut bytes = Vec::new();
        write_tensor(&mut bytes, &split.images)?;
        write_atomic(&dir.join(&file), &bytes)?;
        splits.push(SplitManifest {
            name: split.name.clone(),
            images: file,
            labels: split.labels.clone(),
            boxes: split.boxes.clone(),
        });
    }
    let mut bytes = Vec::new();
    write_tensor(&mut bytes, &ds.semantics())?;
    write_atomic(&dir.join("semantics.sgmt"), &bytes)?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: ds.config.clone(),
        semantic_dim: ds.config.semantic_dim(),
        classes: ds.classes.clone(),
        semantics: "semantics.sgmt".into(),
        splits,
    };
    write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load(dir: &Path) -> Result<ZslDataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::data(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "dataset format version {} is not supported (expected {FORMAT_VERSION})",
            m.version
        )));
    }
    m.config.validate()?;
    if m.classes.len() != m.config.num_classes {
        return Err(Error::data("manifest class list disagrees with its config"));
    }
    if m.classes.iter().enumerate().any(|(i, c)| c.id != i || c.attributes.len() != m.semantic_dim) {
        return Err(Error::data("class ids or attribute lengths are inconsistent"));
    }
    let s = m.config.image_size;
    let mut loaded = Vec::new();
    for sm in &m.splits {
        let bytes = fs::read(dir.join(&sm.images))?;
        let images = read_tensor(&mut bytes.as_slice())
            .map_err(|e| Error::data(format!("corrupt image blob {}: {e}", sm.images)))?;
        if images.shape() != [sm.labels.len(), 3, s, s] || sm.boxes.len() != sm.labels.len() {
            return Err(Error::data(format!(
                "split '{}' has images {:?} for {} labels",
                sm.name,
                images.shape(),
                sm.labels.len()
            )));
        }
        if let Some(&bad) = sm.labels.iter().find(|&&l| l >= m.classes.len()) {
            return Err(Error::data(format!("split '{}' has unknown label {bad}", sm.name)));
        }
        loaded.push(Split {
            name: sm.name.clone(),
            images,
            labels: sm.labels.clone(),
            boxes: sm.boxes.clone(),
        });
    }
    let take = |name: &str| -> Result<Split> {
        loaded
            .iter()
            .find(|s| s.name == name)
            .cloned()
            .ok_or_else(|| Error::data(format!("split '{name}' is missing from the manifest")))
    };
    let ds = ZslDataset {
        train: take("train")?,
        val: take("val")?,
        test_seen: take("test_seen")?,
        test_unseen: take("test_unseen")?,
        config: m.config,
        classes: m.classes,
    };
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_classes: 6,
            num_unseen: 2,
            samples_per_class: 7,
            ..Default::default()
        }
    }

    #[test]
    fn split_sizes() {
        let ds = generate(&small()).unwrap();
        assert_eq!(small().split_counts(), (5, 1, 1));
        assert_eq!(ds.train.len(), 20);
        assert_eq!(ds.val.len(), 4);
        assert_eq!(ds.test_seen.len(), 4);
        assert_eq!(ds.test_unseen.len(), 14);
        assert_eq!(ds.seen(), vec![0, 1, 2, 3]);
        assert_eq!(ds.unseen(), vec![4, 5]);
    }

    #[test]
    fn validation_rejects_bad_counts() {
        let c = SynthConfig {
            num_unseen: 20,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_side_box() {
        let b = random_box(32, 32.0, 5);
        assert_eq!((b.cx, b.cy, b.side), (16.0, 16.0, 32.0));
    }

    #[test]
    fn seeds_differ_per_stream() {
        assert_ne!(mix_seed(0, 1), mix_seed(0, 2));
        assert_ne!(mix_seed(1, 1), mix_seed(0, 1));
    }
}
