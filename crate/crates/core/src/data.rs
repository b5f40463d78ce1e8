//! Synthetic multi-class segmentation scenes and labeled/unlabeled splits.
//!
//! Each image is a textured, high-variance background (class 0) with
//! non-overlapping rectangles, circles, and triangles painted on top, one
//! foreground class per shape. The last two foreground classes share a base
//! color and differ only in a fine diagonal stripe texture, so they form a
//! confusable pair.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::seeds::{rng_for, Rng};

/// Image channels produced by the generator.
pub const CHANNELS: usize = 3;

const PLACEMENT_RETRIES: usize = 100;
const STRIPE_AMPLITUDE: f64 = 0.12;
const SHAPE_JITTER: f64 = 0.05;

/// Per-pixel class ids, row-major `H x W`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("label_map", format!("{height}x{width} needs {} ids, got {}", height * width, data.len())));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap { height, width, data: vec![class; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
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

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        LabelMap { data, ..*self }
    }
}

/// Per-pixel boolean map, row-major `H x W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", format!("{height}x{width} needs {} entries, got {}", height * width, data.len())));
        }
        Ok(Mask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.data.len() != other.data.len() {
            return Err(Error::shape("mask_and", "sizes differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        Ok(Mask { data, ..*self })
    }

    /// Whether every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.len() == other.data.len() && self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: usize,
    /// `[CHANNELS, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: LabelMap,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.label.height()
    }

    pub fn width(&self) -> usize {
        self.label.width()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub shapes_per_image: usize,
    pub noise_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { seed: 0, count: 208, height: 64, width: 64, num_classes: 5, shapes_per_image: 4, noise_std: 0.05 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes must be in 2..=255, got {}", self.num_classes)));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!("images must be at least 16x16, got {}x{}", self.height, self.width)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be finite and >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// Appearance of one foreground class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassStyle {
    pub color: [f64; 3],
    pub striped: bool,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
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

/// Styles for classes `1..num_classes` (index 0 of the result is class 1).
pub fn class_styles(num_classes: usize) -> Vec<ClassStyle> {
    let fg = num_classes.saturating_sub(1);
    let distinct = if fg >= 2 { fg - 1 } else { fg };
    let mut styles: Vec<ClassStyle> = (0..distinct)
        .map(|k| ClassStyle { color: hsv_to_rgb(k as f64 / distinct as f64, 0.75, 0.85), striped: false })
        .collect();
    if fg >= 2 {
        let twin = styles[distinct - 1].color;
        styles.push(ClassStyle { color: twin, striped: true });
    }
    styles
}

fn stripe_phase(y: usize, x: usize) -> f64 {
    if ((x + y) / 2).is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Rect,
    Circle,
    Triangle { orientation: u8 },
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    kind: ShapeKind,
    y0: usize,
    x0: usize,
    size: usize,
}

impl Placed {
    fn overlaps(&self, other: &Placed) -> bool {
        // one pixel of margin between bounding boxes
        let a = (self.y0, self.x0, self.y0 + self.size + 1, self.x0 + self.size + 1);
        let b = (other.y0, other.x0, other.y0 + other.size + 1, other.x0 + other.size + 1);
        a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
    }

    /// Exact coverage test at the pixel center.
    fn contains(&self, y: usize, x: usize) -> bool {
        if y < self.y0 || x < self.x0 || y >= self.y0 + self.size || x >= self.x0 + self.size {
            return false;
        }
        let s = self.size as f64;
        let (u, v) = ((x - self.x0) as f64 + 0.5, (y - self.y0) as f64 + 0.5);
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Circle => {
                let r = s / 2.0;
                (u - r).powi(2) + (v - r).powi(2) <= r * r
            }
            ShapeKind::Triangle { orientation } => {
                // isosceles, apex on one side of the box, base on the opposite side
                let (along, across) = match orientation {
                    0 => (v, u),
                    1 => (s - v, u),
                    2 => (u, v),
                    _ => (s - u, v),
                };
                let half = 0.5 * s * along / s;
                (across - s / 2.0).abs() <= half
            }
        }
    }
}

fn paint_background(rng: &mut Rng, h: usize, w: usize, out: &mut [f64]) {
    let base = rng.random_range(0.25..0.75);
    let tint: [f64; 3] = std::array::from_fn(|_| base + rng.random_range(-0.15..0.15));
    let gratings: Vec<([f64; 3], f64, f64, f64)> = (0..2)
        .map(|_| {
            let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.2));
            let period = rng.random_range(8.0..32.0);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (amp, std::f64::consts::TAU / period * theta.cos(), std::f64::consts::TAU / period * theta.sin(), phase)
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let texture = rng.random_range(-0.1..0.1);
            for c in 0..CHANNELS {
                let mut v = tint[c] + texture;
                for (amp, fx, fy, phase) in &gratings {
                    v += amp[c] * (fx * x as f64 + fy * y as f64 + phase).sin();
                }
                out[(c * h + y) * w + x] = v;
            }
        }
    }
}

fn render_sample(cfg: &DataConfig, id: usize) -> Result<SegSample> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = rng_for(cfg.seed, "data.sample", id as u64);
    let mut pixels = vec![0.0; CHANNELS * h * w];
    paint_background(&mut rng, h, w, &mut pixels);
    let mut label = vec![0u8; h * w];

    let styles = class_styles(cfg.num_classes);
    let side = h.min(w);
    let (min_size, max_size) = ((side / 6).max(4), (side / 3).max(5));
    let mut placed: Vec<Placed> = Vec::with_capacity(cfg.shapes_per_image);
    for n in 0..cfg.shapes_per_image {
        let mut candidate = None;
        for _ in 0..PLACEMENT_RETRIES {
            let size = rng.random_range(min_size..=max_size);
            let kind = match rng.random_range(0..3) {
                0 => ShapeKind::Rect,
                1 => ShapeKind::Circle,
                _ => ShapeKind::Triangle { orientation: rng.random_range(0..4) },
            };
            let shape = Placed { kind, y0: rng.random_range(0..=h - size), x0: rng.random_range(0..=w - size), size };
            if placed.iter().all(|p| !p.overlaps(&shape)) {
                candidate = Some(shape);
                break;
            }
        }
        let shape = candidate.ok_or_else(|| {
            Error::Generation(format!(
                "sample {id}: could not place shape {} of {} after {PLACEMENT_RETRIES} attempts",
                n + 1,
                cfg.shapes_per_image
            ))
        })?;
        let class = rng.random_range(1..cfg.num_classes);
        let style = styles[class - 1];
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-SHAPE_JITTER..SHAPE_JITTER));
        for y in shape.y0..shape.y0 + shape.size {
            for x in shape.x0..shape.x0 + shape.size {
                if !shape.contains(y, x) {
                    continue;
                }
                label[y * w + x] = class as u8;
                let stripe = if style.striped { STRIPE_AMPLITUDE * stripe_phase(y, x) } else { 0.0 };
                for c in 0..CHANNELS {
                    pixels[(c * h + y) * w + x] = style.color[c] + jitter[c] + stripe;
                }
            }
        }
        placed.push(shape);
    }

    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        pixels.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(SegSample { id, image: Tensor::new([CHANNELS, h, w], pixels)?, label: LabelMap::new(h, w, label)? })
}

/// Renders samples `0..cfg.count`. Every sample is a pure function of
/// `(cfg, id)`, so identical configs give bit-identical output.
pub fn generate(cfg: &DataConfig) -> Result<Vec<SegSample>> {
    generate_ids(cfg, 0..cfg.count)
}

/// Renders the given sample ids under `cfg` (ignores `cfg.count`).
pub fn generate_ids(cfg: &DataConfig, ids: std::ops::Range<usize>) -> Result<Vec<SegSample>> {
    cfg.validate()?;
    ids.map(|id| render_sample(cfg, id)).collect()
}

/// Image-only view of an unlabeled sample; the training path never sees more.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledView<'a> {
    pub id: usize,
    pub image: &'a Tensor,
}

/// Labeled and unlabeled training data plus a held-out validation set.
///
/// Unlabeled ground truth is reachable only through
/// [`DatasetSplit::unlabeled_ground_truth`], which counts every read.
#[derive(Debug)]
pub struct DatasetSplit {
    pub labeled: Vec<SegSample>,
    unlabeled: Vec<SegSample>,
    pub validation: Vec<SegSample>,
    pub seed: u64,
    ground_truth_reads: AtomicUsize,
}

impl Clone for DatasetSplit {
    fn clone(&self) -> Self {
        DatasetSplit {
            labeled: self.labeled.clone(),
            unlabeled: self.unlabeled.clone(),
            validation: self.validation.clone(),
            seed: self.seed,
            ground_truth_reads: AtomicUsize::new(self.ground_truth_reads()),
        }
    }
}

impl DatasetSplit {
    pub fn from_parts(labeled: Vec<SegSample>, unlabeled: Vec<SegSample>, validation: Vec<SegSample>, seed: u64) -> Result<Self> {
        let mut ids: Vec<usize> = labeled.iter().chain(&unlabeled).chain(&validation).map(|s| s.id).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return Err(Error::Contract("sample ids of labeled, unlabeled and validation sets must be disjoint".into()));
        }
        Ok(DatasetSplit { labeled, unlabeled, validation, seed, ground_truth_reads: AtomicUsize::new(0) })
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn unlabeled(&self, index: usize) -> UnlabeledView<'_> {
        let s = &self.unlabeled[index];
        UnlabeledView { id: s.id, image: &s.image }
    }

    pub fn unlabeled_views(&self) -> impl Iterator<Item = UnlabeledView<'_>> {
        self.unlabeled.iter().map(|s| UnlabeledView { id: s.id, image: &s.image })
    }

    /// Evaluation-only access to unlabeled ground truth.
    pub fn unlabeled_ground_truth(&self, index: usize) -> &LabelMap {
        self.ground_truth_reads.fetch_add(1, Ordering::Relaxed);
        &self.unlabeled[index].label
    }

    pub fn ground_truth_reads(&self) -> usize {
        self.ground_truth_reads.load(Ordering::Relaxed)
    }

    /// All samples with their roles, for export.
    pub fn samples_with_roles(&self) -> impl Iterator<Item = (&SegSample, Role)> {
        self.labeled
            .iter()
            .map(|s| (s, Role::Labeled))
            .chain(self.unlabeled.iter().map(|s| (s, Role::Unlabeled)))
            .chain(self.validation.iter().map(|s| (s, Role::Validation)))
    }

    pub fn num_classes_hint(&self) -> usize {
        self.samples_with_roles().flat_map(|(s, _)| s.label.data().iter().copied()).max().map_or(0, |m| m as usize + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Labeled,
    Unlabeled,
    Validation,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Labeled => "labeled",
            Role::Unlabeled => "unlabeled",
            Role::Validation => "validation",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Role::Labeled),
            "unlabeled" => Ok(Role::Unlabeled),
            "validation" => Ok(Role::Validation),
            other => Err(Error::Config(format!("unknown sample role `{other}`"))),
        }
    }
}

/// Uniformly chooses `labeled_count` samples as labeled; the rest become unlabeled.
pub fn split(samples: Vec<SegSample>, labeled_count: usize, seed: u64) -> Result<DatasetSplit> {
    if labeled_count == 0 {
        return Err(Error::Config("labeled_count must be at least 1 for the supervised warm-up".into()));
    }
    if labeled_count > samples.len() {
        return Err(Error::Config(format!("labeled_count {labeled_count} exceeds sample count {}", samples.len())));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng_for(seed, "split", 0));
    let mut chosen = vec![false; samples.len()];
    order[..labeled_count].iter().for_each(|&i| chosen[i] = true);
    let (mut labeled, mut unlabeled) = (Vec::new(), Vec::new());
    for (s, is_labeled) in samples.into_iter().zip(chosen) {
        if is_labeled {
            labeled.push(s);
        } else {
            unlabeled.push(s);
        }
    }
    DatasetSplit::from_parts(labeled, unlabeled, Vec::new(), seed)
}

/// Flip and brightness decision of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub jitter: [f64; CHANNELS],
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { flip: false, jitter: [0.0; CHANNELS] }
    }

    pub fn draw(rng: &mut Rng) -> Self {
        AugmentParams { flip: rng.random_bool(0.5), jitter: std::array::from_fn(|_| rng.random_range(-0.05..0.05)) }
    }
}

/// Weak augmentation: horizontal flip with probability 0.5 and per-channel
/// brightness jitter in `[-0.05, 0.05)`, clipped to `[0, 1]`.
pub fn augment(sample: &SegSample, seed: u64) -> SegSample {
    let params = AugmentParams::draw(&mut rng_for(seed, "augment", sample.id as u64));
    augment_with(sample, params)
}

pub fn augment_with(sample: &SegSample, params: AugmentParams) -> SegSample {
    SegSample { id: sample.id, image: augment_image(&sample.image, params), label: if params.flip { sample.label.flip_horizontal() } else { sample.label.clone() } }
}

/// Applies `params` to a `[C, H, W]` image.
pub fn augment_image(image: &Tensor, params: AugmentParams) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    Tensor::from_fn([c, h, w], |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        let (y, x) = (rest / w, rest % w);
        let sx = if params.flip { w - 1 - x } else { x };
        let v = src[(ch * h + y) * w + sx];
        if params.jitter[ch % CHANNELS] == 0.0 {
            v
        } else {
            (v + params.jitter[ch % CHANNELS]).clamp(0.0, 1.0)
        }
    })
}
