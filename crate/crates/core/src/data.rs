//! Long-tailed datasets: count profiles, CIFAR binary ingestion, procedural
//! shape images, class splits and the two batch samplers.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shot-count bucket of a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Many,
    Medium,
    Low,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Many, Split::Medium, Split::Low];
}

/// many iff `count > many_above`, low iff `count < low_below`, medium otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitThresholds {
    pub many_above: usize,
    pub low_below: usize,
}

impl Default for SplitThresholds {
    fn default() -> Self {
        SplitThresholds {
            many_above: 100,
            low_below: 20,
        }
    }
}

impl SplitThresholds {
    pub fn split_for(&self, count: usize) -> Split {
        if count > self.many_above {
            Split::Many
        } else if count < self.low_below {
            Split::Low
        } else {
            Split::Medium
        }
    }

    pub fn assign(&self, class_counts: &[usize]) -> Vec<Split> {
        class_counts.iter().map(|&n| self.split_for(n)).collect()
    }
}

/// Exponential long-tail profile `n_i = base * rho^(-i/(N-1))`, truncated to an
/// integer and clamped at one image per class.
///
/// Truncation (rather than rounding) is what reproduces the published
/// CIFAR-LT endpoints, e.g. `500 / 200 = 2.5 -> 2`.
pub fn make_longtailed(base_per_class: usize, num_classes: usize, rho: f64) -> Result<Vec<usize>> {
    if !rho.is_finite() || rho < 1.0 {
        return Err(Error::invalid(format!("imbalance ratio must be >= 1, got {rho}")));
    }
    if base_per_class == 0 || num_classes == 0 {
        return Err(Error::invalid("base_per_class and num_classes must be positive"));
    }
    if (base_per_class as f64) / rho < 1.0 {
        return Err(Error::invalid(format!(
            "base_per_class {base_per_class} / rho {rho} leaves less than one image"
        )));
    }
    let counts = (0..num_classes)
        .map(|i| {
            let frac = if num_classes == 1 { 0.0 } else { i as f64 / (num_classes - 1) as f64 };
            let n = base_per_class as f64 * rho.powf(-frac);
            // tolerate values like 99.99999999 that are exact in decimal
            ((n + 1e-9).floor() as usize).max(1)
        })
        .collect();
    Ok(counts)
}

/// Labeled images with per-class counts and split tags.
#[derive(Clone, Debug)]
pub struct LongTailedDataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    num_classes: usize,
    class_counts: Vec<usize>,
    thresholds: SplitThresholds,
    pub meta: DatasetMeta,
}

/// Provenance carried into manifests.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub source: String,
    pub seed: u64,
    pub rho: Option<f64>,
    pub class_names: Vec<String>,
}

impl LongTailedDataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, num_classes: usize, thresholds: SplitThresholds) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if first.ndim() != 3 {
                return Err(Error::invalid(format!("images must be [C,H,W], got {:?}", first.shape())));
            }
            if let Some(bad) = images.iter().find(|im| im.shape() != first.shape()) {
                return Err(Error::invalid(format!(
                    "image shape {:?} differs from {:?}",
                    bad.shape(),
                    first.shape()
                )));
            }
        }
        let mut class_counts = vec![0; num_classes];
        for &l in &labels {
            *class_counts
                .get_mut(l)
                .ok_or_else(|| Error::invalid(format!("label {l} out of range for {num_classes} classes")))? += 1;
        }
        Ok(LongTailedDataset {
            images,
            labels,
            num_classes,
            class_counts,
            thresholds,
            meta: DatasetMeta::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn thresholds(&self) -> SplitThresholds {
        self.thresholds
    }

    pub fn set_thresholds(&mut self, thresholds: SplitThresholds) {
        self.thresholds = thresholds;
    }

    pub fn splits(&self) -> Vec<Split> {
        self.thresholds.assign(&self.class_counts)
    }

    /// `[C,H,W]` of every image, or `None` for an empty dataset.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.shape())
    }

    /// `max / min` class count over non-empty classes.
    pub fn imbalance_ratio(&self) -> f64 {
        let max = self.class_counts.iter().copied().max().unwrap_or(0);
        let min = self.class_counts.iter().copied().filter(|&n| n > 0).min().unwrap_or(0);
        if min == 0 {
            return f64::INFINITY;
        }
        max as f64 / min as f64
    }

    /// Dataset indices grouped by label, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Stacks selected images into one `[B,C,H,W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let items: Vec<&Tensor> = indices.iter().map(|&i| &self.images[i]).collect();
        let x = Tensor::stack(&items)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

// ---------------------------------------------------------------------------
// CIFAR binary format

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Human-readable layout, used in error messages.
    pub fn layout(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "3073-byte records: 1 label byte, then 1024 R, 1024 G, 1024 B bytes (32x32 row-major)",
            CifarVariant::Cifar100 => {
                "3074-byte records: coarse label byte, fine label byte, then 1024 R, 1024 G, 1024 B bytes (32x32 row-major)"
            }
        }
    }
}

/// One decoded CIFAR record. Pixels are `[3,32,32]` in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CifarRecord {
    pub image: Tensor,
    pub label: usize,
    /// CIFAR-100 only.
    pub coarse_label: Option<u8>,
}

pub fn decode_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Vec<CifarRecord>> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        let offset = (bytes.len() / rec * rec) as u64;
        return Err(Error::format(
            offset,
            format!(
                "truncated record: {} trailing bytes, expected {}",
                bytes.len() % rec,
                variant.layout()
            ),
        ));
    }
    let n_classes = variant.num_classes();
    bytes
        .chunks_exact(rec)
        .enumerate()
        .map(|(i, chunk)| {
            let (coarse_label, label, pixels) = match variant {
                CifarVariant::Cifar10 => (None, chunk[0], &chunk[1..]),
                CifarVariant::Cifar100 => (Some(chunk[0]), chunk[1], &chunk[2..]),
            };
            if label as usize >= n_classes {
                let label_offset = (i * rec + rec - CIFAR_PIXELS - 1) as u64;
                return Err(Error::format(
                    label_offset,
                    format!("label {label} out of range for {n_classes} classes"),
                ));
            }
            if let Some(c) = coarse_label {
                if c >= 20 {
                    return Err(Error::format((i * rec) as u64, format!("coarse label {c} out of range")));
                }
            }
            let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
            Ok(CifarRecord {
                image: Tensor::new(vec![3, 32, 32], data)?,
                label: label as usize,
                coarse_label,
            })
        })
        .collect()
}

/// Inverse of [`decode_cifar`]; pixel values are rounded back to bytes.
pub fn encode_cifar(records: &[CifarRecord], variant: CifarVariant) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * variant.record_len());
    for r in records {
        if r.image.shape() != [3, 32, 32] {
            return Err(Error::invalid(format!("CIFAR image must be [3,32,32], got {:?}", r.image.shape())));
        }
        if r.label >= variant.num_classes() {
            return Err(Error::invalid(format!("label {} out of range", r.label)));
        }
        if variant == CifarVariant::Cifar100 {
            out.push(r.coarse_label.unwrap_or(0));
        }
        out.push(r.label as u8);
        out.extend(r.image.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<Vec<CifarRecord>> {
    let bytes = fs::read(path).map_err(|e| {
        Error::io(
            path,
            std::io::Error::new(e.kind(), format!("{e} (expected CIFAR binary with {})", variant.layout())),
        )
    })?;
    decode_cifar(&bytes, variant)
}

/// Keeps the first `counts[c]` images of each class in collection order.
pub fn truncate_longtailed(
    records: &[CifarRecord],
    num_classes: usize,
    counts: &[usize],
    thresholds: SplitThresholds,
) -> Result<LongTailedDataset> {
    if counts.len() != num_classes {
        return Err(Error::invalid(format!(
            "{} counts for {num_classes} classes",
            counts.len()
        )));
    }
    let mut taken = vec![0usize; num_classes];
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for r in records {
        if r.label < num_classes && taken[r.label] < counts[r.label] {
            taken[r.label] += 1;
            images.push(r.image.clone());
            labels.push(r.label);
        }
    }
    if let Some(c) = (0..num_classes).find(|&c| taken[c] < counts[c]) {
        return Err(Error::invalid(format!(
            "class {c} has only {} images, {} requested",
            taken[c], counts[c]
        )));
    }
    LongTailedDataset::new(images, labels, num_classes, thresholds)
}

// ---------------------------------------------------------------------------
// Procedural shapes

/// Knobs for the procedural image generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthStyle {
    /// Per-pixel uniform noise amplitude.
    pub noise: f32,
    /// Number of random distractor strokes.
    pub clutter: usize,
    /// Object radius as a fraction of the image side, `[min, max]`.
    pub scale: [f32; 2],
}

impl Default for SynthStyle {
    fn default() -> Self {
        SynthStyle {
            noise: 0.25,
            clutter: 3,
            scale: [0.28, 0.42],
        }
    }
}

type Pattern = fn(f32, f32) -> bool;

fn in_square(u: f32, v: f32) -> bool {
    u.abs() <= 1.0 && v.abs() <= 1.0
}

const PI: f32 = std::f32::consts::PI;

/// Shape masks in local coordinates `u, v in [-1, 1]`.
const PATTERNS: [(&str, Pattern); 16] = [
    ("horizontal_bars", |u, v| in_square(u, v) && (v * 2.5 * PI).sin() > 0.0),
    ("vertical_bars", |u, v| in_square(u, v) && (u * 2.5 * PI).sin() > 0.0),
    ("diagonal_bars", |u, v| in_square(u, v) && ((u + v) * 2.0 * PI).sin() > 0.0),
    ("antidiagonal_bars", |u, v| in_square(u, v) && ((u - v) * 2.0 * PI).sin() > 0.0),
    ("ring", |u, v| ((u * u + v * v).sqrt() - 0.72).abs() < 0.2),
    ("disk", |u, v| u * u + v * v < 0.6),
    ("checkers", |u, v| {
        in_square(u, v) && (((u + 1.0) * 1.5).floor() as i32 + ((v + 1.0) * 1.5).floor() as i32) % 2 == 0
    }),
    ("plus", |u, v| in_square(u, v) && (u.abs() < 0.25 || v.abs() < 0.25)),
    ("cross", |u, v| in_square(u, v) && ((u - v).abs() < 0.32 || (u + v).abs() < 0.32)),
    ("square_outline", |u, v| {
        let m = u.abs().max(v.abs());
        (0.62..=1.0).contains(&m)
    }),
    ("triangle", |u, v| v > -0.8 && v < 0.9 && u.abs() < (0.9 - v) * 0.55),
    ("corner_blobs", |u, v| {
        let d = |a: f32, b: f32| (u - a).powi(2) + (v - b).powi(2) < 0.1;
        d(0.6, 0.6) || d(-0.6, 0.6) || d(0.6, -0.6) || d(-0.6, -0.6)
    }),
    ("target", |u, v| {
        let r = (u * u + v * v).sqrt();
        r < 0.3 || (r - 0.8).abs() < 0.15
    }),
    ("dot_grid", |u, v| {
        let fu = ((u + 1.0) * 1.5).fract() - 0.5;
        let fv = ((v + 1.0) * 1.5).fract() - 0.5;
        in_square(u, v) && fu * fu + fv * fv < 0.09
    }),
    ("ell", |u, v| in_square(u, v) && (u < -0.35 || v > 0.35)),
    ("diamond", |u, v| {
        let m = u.abs() + v.abs();
        (0.55..=1.0).contains(&m)
    }),
];

/// Number of distinct procedural classes available.
pub const MAX_SYNTH_CLASSES: usize = PATTERNS.len();

pub fn synth_class_names(num_classes: usize) -> Vec<String> {
    PATTERNS.iter().take(num_classes).map(|(n, _)| n.to_string()).collect()
}

fn image_rng(seed: u64, class: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    rng
}

/// Renders one `[3,S,S]` image of `class`.
pub fn render_shape(class: usize, image_size: usize, style: &SynthStyle, rng: &mut impl Rng) -> Tensor {
    let s = image_size as f32;
    let plane = image_size * image_size;
    let mut img = vec![0f32; 3 * plane];
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.45));
    for c in 0..3 {
        for p in 0..plane {
            img[c * plane + p] = bg[c] + rng.random_range(-style.noise..=style.noise) * 0.5;
        }
    }
    // distractor strokes share the object colour range
    for _ in 0..style.clutter {
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
        let (x0, y0) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let angle = rng.random_range(0.0..PI);
        let len = rng.random_range(0.15..0.35) * s;
        let steps = (len * 2.0) as usize + 1;
        for t in 0..steps {
            let f = t as f32 / steps as f32 * len;
            let (x, y) = (x0 + f * angle.cos(), y0 + f * angle.sin());
            if x >= 0.0 && y >= 0.0 && x < s && y < s {
                let p = y as usize * image_size + x as usize;
                for c in 0..3 {
                    img[c * plane + p] = color[c];
                }
            }
        }
    }
    let pattern = PATTERNS[class].1;
    let radius = rng.random_range(style.scale[0]..=style.scale[1]) * s;
    let margin = radius * 0.8;
    let cx = rng.random_range(margin..(s - margin).max(margin + 1e-3));
    let cy = rng.random_range(margin..(s - margin).max(margin + 1e-3));
    let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
    for y in 0..image_size {
        for x in 0..image_size {
            let u = (x as f32 + 0.5 - cx) / radius;
            let v = (y as f32 + 0.5 - cy) / radius;
            if pattern(u, v) {
                for c in 0..3 {
                    img[c * plane + y * image_size + x] = color[c];
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![3, image_size, image_size], img).expect("shape matches buffer")
}

/// Procedural long-tailed dataset: `counts[c]` images of pattern `c`.
/// Every image is a pure function of `(seed, class, index)`.
pub fn synth_shapes(num_classes: usize, counts: &[usize], image_size: usize, seed: u64) -> Result<LongTailedDataset> {
    synth_shapes_with(num_classes, counts, image_size, seed, &SynthStyle::default())
}

pub fn synth_shapes_with(
    num_classes: usize,
    counts: &[usize],
    image_size: usize,
    seed: u64,
    style: &SynthStyle,
) -> Result<LongTailedDataset> {
    if image_size < 16 {
        return Err(Error::invalid(format!("image_size must be >= 16, got {image_size}")));
    }
    if num_classes == 0 || num_classes > MAX_SYNTH_CLASSES {
        return Err(Error::invalid(format!(
            "synthetic data supports 1..={MAX_SYNTH_CLASSES} classes, got {num_classes}"
        )));
    }
    if counts.len() != num_classes {
        return Err(Error::invalid(format!("{} counts for {num_classes} classes", counts.len())));
    }
    let mut images = Vec::with_capacity(counts.iter().sum());
    let mut labels = Vec::with_capacity(images.capacity());
    for (class, &n) in counts.iter().enumerate() {
        for index in 0..n {
            let mut rng = image_rng(seed, class, index);
            images.push(render_shape(class, image_size, style, &mut rng));
            labels.push(class);
        }
    }
    let mut ds = LongTailedDataset::new(images, labels, num_classes, SplitThresholds::default())?;
    ds.meta = DatasetMeta {
        source: "synthetic".into(),
        seed,
        rho: None,
        class_names: synth_class_names(num_classes),
    };
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Sampling

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    InstanceBalanced,
    ClassBalanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub seed: u64,
    pub batch_size: usize,
}

/// A stateful sampler drawing index batches with replacement.
#[derive(Clone, Debug)]
pub struct Sampler {
    spec: SamplerSpec,
    rng: ChaCha8Rng,
    by_class: Vec<Vec<usize>>,
    len: usize,
}

impl Sampler {
    pub fn new(dataset: &LongTailedDataset, spec: SamplerSpec) -> Result<Self> {
        Self::from_labels(dataset.labels(), dataset.num_classes(), spec)
    }

    pub fn from_labels(labels: &[usize], num_classes: usize, spec: SamplerSpec) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("cannot sample from an empty dataset"));
        }
        if spec.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        if spec.kind == SamplerKind::ClassBalanced {
            if let Some(c) = by_class.iter().position(Vec::is_empty) {
                return Err(Error::invalid(format!("class {c} is empty; class-balanced sampling needs every class")));
            }
        }
        Ok(Sampler {
            spec,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            by_class,
            len: labels.len(),
        })
    }

    pub fn spec(&self) -> SamplerSpec {
        self.spec
    }

    pub fn draw(&mut self) -> usize {
        match self.spec.kind {
            SamplerKind::InstanceBalanced => self.rng.random_range(0..self.len),
            SamplerKind::ClassBalanced => {
                let class = self.rng.random_range(0..self.by_class.len());
                let members = &self.by_class[class];
                members[self.rng.random_range(0..members.len())]
            }
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        (0..self.spec.batch_size).map(|_| self.draw()).collect()
    }
}

/// One batch of dataset indices drawn with a caller-held sampler state.
pub fn sample_batch(sampler: &mut Sampler) -> Vec<usize> {
    sampler.next_batch()
}

/// Seeded per-class shuffle used for deterministic subset selection.
pub fn shuffled_class_members(dataset: &LongTailedDataset, class: usize, seed: u64) -> Vec<usize> {
    let mut members = dataset.indices_by_class().swap_remove(class);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(class as u64);
    members.shuffle(&mut rng);
    members
}

// ---------------------------------------------------------------------------
// Directory export

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub source: String,
    pub seed: u64,
    pub rho: Option<f64>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
    pub image_shape: Vec<usize>,
    pub num_images: usize,
    pub thresholds: SplitThresholds,
}

const MANIFEST: &str = "manifest.json";
const IMAGES: &str = "images.bin";
const LABELS: &str = "labels.bin";

/// Writes `manifest.json`, `images.bin` (little-endian f32, row-major,
/// concatenated) and `labels.bin` (little-endian u32) into `dir`.
pub fn save_dataset_dir(dataset: &LongTailedDataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest {
        format_version: 1,
        source: dataset.meta.source.clone(),
        seed: dataset.meta.seed,
        rho: dataset.meta.rho,
        num_classes: dataset.num_classes,
        class_names: dataset.meta.class_names.clone(),
        class_counts: dataset.class_counts.clone(),
        image_shape: dataset.image_shape().map(<[usize]>::to_vec).unwrap_or_default(),
        num_images: dataset.len(),
        thresholds: dataset.thresholds,
    };
    let mut blob = Vec::with_capacity(dataset.images.iter().map(|t| t.len() * 4).sum());
    for im in &dataset.images {
        for v in im.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let labels: Vec<u8> = dataset.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write(dir.join(MANIFEST), &json)?;
    write(dir.join(IMAGES), &blob)?;
    write(dir.join(LABELS), &labels)?;
    Ok(manifest)
}

fn write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

fn read(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_dataset_dir(dir: &Path) -> Result<LongTailedDataset> {
    let manifest: DatasetManifest = serde_json::from_slice(&read(dir.join(MANIFEST))?)?;
    let blob = read(dir.join(IMAGES))?;
    let label_bytes = read(dir.join(LABELS))?;
    let per_image: usize = manifest.image_shape.iter().product();
    let expected = manifest.num_images * per_image * 4;
    if blob.len() != expected {
        return Err(Error::format(
            blob.len().min(expected) as u64,
            format!("images.bin holds {} bytes, manifest implies {expected}", blob.len()),
        ));
    }
    if label_bytes.len() != manifest.num_images * 4 {
        return Err(Error::format(
            label_bytes.len().min(manifest.num_images * 4) as u64,
            "labels.bin length disagrees with manifest",
        ));
    }
    let images = blob
        .chunks_exact((per_image * 4).max(1))
        .take(manifest.num_images)
        .map(|chunk| {
            let data = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            Tensor::new(manifest.image_shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = label_bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    let mut ds = LongTailedDataset::new(images, labels, manifest.num_classes, manifest.thresholds)?;
    if ds.class_counts != manifest.class_counts {
        return Err(Error::format(0, "manifest class_counts disagree with labels.bin"));
    }
    ds.meta = DatasetMeta {
        source: manifest.source,
        seed: manifest.seed,
        rho: manifest.rho,
        class_names: manifest.class_names,
    };
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_endpoints() {
        let c = make_longtailed(5000, 10, 100.0).unwrap();
        assert_eq!((c[0], c[9]), (5000, 50));
        let c = make_longtailed(500, 100, 200.0).unwrap();
        assert_eq!((c[0], c[99]), (500, 2));
        assert_eq!(make_longtailed(37, 6, 1.0).unwrap(), vec![37; 6]);
        assert!(make_longtailed(10, 3, 0.5).is_err());
        assert!(make_longtailed(10, 3, 20.0).is_err());
    }

    #[test]
    fn split_thresholds_follow_counts() {
        let t = SplitThresholds::default();
        assert_eq!(
            t.assign(&[101, 100, 20, 19, 5]),
            vec![Split::Many, Split::Medium, Split::Medium, Split::Low, Split::Low]
        );
    }

    #[test]
    fn cifar_single_record() {
        let mut bytes = vec![7u8];
        bytes.extend(std::iter::repeat_n(255u8, CIFAR_PIXELS));
        let recs = decode_cifar(&bytes, CifarVariant::Cifar10).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].label, 7);
        assert!(recs[0].image.data().iter().all(|&v| v == 1.0));
        assert!(decode_cifar(&[], CifarVariant::Cifar10).unwrap().is_empty());
    }

    #[test]
    fn cifar_errors_carry_offsets() {
        let mut bytes = vec![0u8; CifarVariant::Cifar10.record_len() * 2 - 5];
        match decode_cifar(&bytes, CifarVariant::Cifar10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("expected format error, got {other:?}"),
        }
        bytes.resize(CifarVariant::Cifar10.record_len() * 2, 0);
        bytes[3073] = 10;
        match decode_cifar(&bytes, CifarVariant::Cifar10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut c100 = vec![3u8, 100];
        c100.extend(std::iter::repeat_n(0u8, CIFAR_PIXELS));
        assert!(matches!(decode_cifar(&c100, CifarVariant::Cifar100), Err(Error::Format { offset: 1, .. })));
    }

    #[test]
    fn synth_bookkeeping_and_determinism() {
        let a = synth_shapes(2, &[100, 10], 16, 1).unwrap();
        assert_eq!(a.len(), 110);
        assert_eq!(a.class_counts(), &[100, 10]);
        assert_eq!(a.splits(), vec![Split::Medium, Split::Low]);
        let b = synth_shapes(2, &[100, 10], 16, 1).unwrap();
        assert!(a.images().iter().zip(b.images()).all(|(x, y)| x.data() == y.data()));
        assert!(a.images().iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(synth_shapes(MAX_SYNTH_CLASSES + 1, &[1; MAX_SYNTH_CLASSES + 1], 16, 1).is_err());
        assert!(synth_shapes(2, &[1, 1], 8, 1).is_err());
    }

    #[test]
    fn sampler_singleton_and_empty_class() {
        let ds = synth_shapes(1, &[1], 16, 0).unwrap();
        let mut s = Sampler::new(&ds, SamplerSpec { kind: SamplerKind::ClassBalanced, seed: 4, batch_size: 1 }).unwrap();
        assert_eq!(s.next_batch(), vec![0]);
        let err = Sampler::from_labels(&[0, 0, 2], 3, SamplerSpec { kind: SamplerKind::ClassBalanced, seed: 0, batch_size: 2 });
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        assert!(Sampler::from_labels(&[0, 0, 2], 3, SamplerSpec { kind: SamplerKind::InstanceBalanced, seed: 0, batch_size: 2 }).is_ok());
    }

    #[test]
    fn sampler_reproducible() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let spec = SamplerSpec { kind: SamplerKind::ClassBalanced, seed: 11, batch_size: 8 };
        let mut a = Sampler::from_labels(&labels, 5, spec).unwrap();
        let mut b = Sampler::from_labels(&labels, 5, spec).unwrap();
        for _ in 0..10 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = synth_shapes(3, &[4, 2, 1], 16, 9).unwrap();
        ds.meta.rho = Some(4.0);
        save_dataset_dir(&ds, dir.path()).unwrap();
        let back = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.meta, ds.meta);
        assert!(back.images().iter().zip(ds.images()).all(|(a, b)| a == b));
    }
}
