//! Student/teacher segmentation network.
//!
//! Encoder: two 3x3 conv + ReLU layers. Two heads share the encoder output:
//! a segmentation head (3x3 conv, ReLU, 1x1 conv to class logits) and a
//! representation head (same structure, 1x1 conv to `rep_dim`, followed by
//! per-pixel L2 normalization). No batch norm.
//!
//! Internally activations are pixel-major (`[B*H*W, C]`) so every conv is a
//! single `im2col` + `matmul` over the whole batch.

use rand_distr::{Distribution, Normal};

use crate::data::CHANNELS;
use crate::error::{Error, Result};
use crate::grad::{ImageLayout, NodeId, Tape, Tensor};
use crate::seeds::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub width: usize,
    pub num_classes: usize,
    pub rep_dim: usize,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        ModelConfig { in_channels: CHANNELS, width: 16, num_classes, rep_dim: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.width == 0 || self.rep_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!("invalid model dimensions {self:?}")));
        }
        Ok(())
    }
}

pub const PARAM_NAMES: [&str; 12] = [
    "enc1.w", "enc1.b", "enc2.w", "enc2.b", "seg1.w", "seg1.b", "seg2.w", "seg2.b", "rep1.w", "rep1.b", "rep2.w",
    "rep2.b",
];

/// Parameter tensors in [`PARAM_NAMES`] order. Conv weights are stored as
/// `[in * k * k, out]` patch matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

fn layer_shapes(cfg: &ModelConfig) -> [(usize, usize); 6] {
    let (i, w) = (cfg.in_channels, cfg.width);
    [(i * 9, w), (w * 9, w), (w * 9, w), (w, cfg.num_classes), (w * 9, w), (w, cfg.rep_dim)]
}

impl ModelParams {
    pub fn shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        layer_shapes(config).iter().flat_map(|&(fan_in, out)| [vec![fan_in, out], vec![out]]).collect()
    }

    /// He-normal weights, zero biases, drawn from the `init` stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "init", 0);
        let mut tensors = Vec::with_capacity(12);
        for (fan_in, out) in layer_shapes(&config) {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
            tensors.push(Tensor::from_fn([fan_in, out], |_| normal.sample(&mut rng)));
            tensors.push(Tensor::zeros([out]));
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(ModelParams { config, tensors: Self::shapes(&config).into_iter().map(Tensor::zeros).collect() })
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = Self::shapes(&config);
        if tensors.len() != expected.len() || tensors.iter().zip(&expected).any(|(t, s)| t.shape() != s.as_slice()) {
            return Err(Error::shape("model_params", format!("tensors do not match {config:?}")));
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.iter().copied().zip(&self.tensors)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Hash of the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.tensors.iter().flat_map(|t| t.data()) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Graph handles for one batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchNodes {
    /// `[B*H*W, num_classes]`, unnormalized.
    pub logits: NodeId,
    /// `[B*H*W, rep_dim]`, unit norm per row.
    pub reps: NodeId,
    /// Parameter nodes in [`PARAM_NAMES`] order.
    pub params: Vec<NodeId>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

fn stack_images(images: &[&Tensor], in_channels: usize) -> Result<(Tensor, usize, usize)> {
    let first = images.first().ok_or_else(|| Error::Contract("forward needs at least one image".into()))?;
    let &[c, h, w] = first.shape() else {
        return Err(Error::shape("forward", format!("image must be [C,H,W], got {:?}", first.shape())));
    };
    if c != in_channels {
        return Err(Error::shape("forward", format!("expected {in_channels} channels, got {c}")));
    }
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::shape("forward", format!("mixed image shapes {:?} and {:?}", first.shape(), img.shape())));
        }
        data.extend_from_slice(img.data());
    }
    Ok((Tensor::new([images.len(), c, h, w], data)?, h, w))
}

/// Records the forward pass of `images` on `tape`. Parameters become leaves
/// when `trainable`, constants otherwise.
pub fn forward_batch(tape: &mut Tape, params: &ModelParams, images: &[&Tensor], trainable: bool) -> Result<BatchNodes> {
    let p: Vec<NodeId> = params
        .tensors
        .iter()
        .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    forward_nodes(tape, &params.config, p, images)
}

/// Forward pass over parameter nodes already on `tape`, in [`PARAM_NAMES`] order.
pub fn forward_nodes(tape: &mut Tape, config: &ModelConfig, p: Vec<NodeId>, images: &[&Tensor]) -> Result<BatchNodes> {
    if p.len() != PARAM_NAMES.len() {
        return Err(Error::Contract(format!("expected {} parameter nodes, got {}", PARAM_NAMES.len(), p.len())));
    }
    let (stacked, height, width) = stack_images(images, config.in_channels)?;
    let batch = images.len();
    let rows = ImageLayout::Rows { batch, height, width };

    let x = tape.constant(stacked);
    let cols = tape.im2col(x, 3, ImageLayout::Planar)?;
    let h1 = conv(tape, cols, p[0], p[1], true)?;
    let cols = tape.im2col(h1, 3, rows)?;
    let feat = conv(tape, cols, p[2], p[3], true)?;
    // both heads read the same patch matrix of the encoder output
    let feat_cols = tape.im2col(feat, 3, rows)?;

    let s1 = conv(tape, feat_cols, p[4], p[5], true)?;
    let logits = conv(tape, s1, p[6], p[7], false)?;

    let r1 = conv(tape, feat_cols, p[8], p[9], true)?;
    let r2 = conv(tape, r1, p[10], p[11], false)?;
    let reps = tape.l2_normalize(r2, 1)?;

    Ok(BatchNodes { logits, reps, params: p, batch, height, width })
}

fn conv(tape: &mut Tape, cols: NodeId, w: NodeId, b: NodeId, relu: bool) -> Result<NodeId> {
    let z = tape.matmul(cols, w)?;
    let z = tape.add(z, b)?;
    Ok(if relu { tape.relu(z) } else { z })
}

/// Per-image outputs in channel-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `[C, H, W]`, unnormalized.
    pub logits: Tensor,
    /// `[d, H, W]`, unit norm along the first axis.
    pub reps: Tensor,
}

/// Converts rows `[B*H*W, C]` of image `b` into a `[C, H, W]` tensor.
pub fn rows_to_planar(rows: &Tensor, b: usize, height: usize, width: usize) -> Result<Tensor> {
    let &[total, c] = rows.shape() else {
        return Err(Error::shape("rows_to_planar", format!("expected a matrix, got {:?}", rows.shape())));
    };
    let hw = height * width;
    if (b + 1) * hw > total {
        return Err(Error::shape("rows_to_planar", format!("image {b} out of range for {total} rows")));
    }
    let src = &rows.data()[b * hw * c..(b + 1) * hw * c];
    Ok(Tensor::from_fn([c, height, width], |i| src[(i % hw) * c + i / hw]))
}

/// Gradient-free forward pass over several images.
pub fn forward_many(params: &ModelParams, images: &[&Tensor]) -> Result<Vec<ForwardOutput>> {
    let mut tape = Tape::new();
    let nodes = forward_batch(&mut tape, params, images, false)?;
    (0..nodes.batch)
        .map(|b| {
            Ok(ForwardOutput {
                logits: rows_to_planar(tape.value(nodes.logits), b, nodes.height, nodes.width)?,
                reps: rows_to_planar(tape.value(nodes.reps), b, nodes.height, nodes.width)?,
            })
        })
        .collect()
}

pub fn forward(params: &ModelParams, image: &Tensor) -> Result<ForwardOutput> {
    Ok(forward_many(params, &[image])?.remove(0))
}

/// EMA copy of the student. SGD never touches these parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ModelParams,
    pub momentum: f64,
}

impl TeacherState {
    pub fn from_student(student: &ModelParams, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("teacher momentum must be in [0,1], got {momentum}")));
        }
        Ok(TeacherState { params: student.clone(), momentum })
    }

    /// `teacher <- m * teacher + (1 - m) * student` for every tensor.
    pub fn ema_update(&mut self, student: &ModelParams) -> Result<()> {
        if self.params.config != student.config {
            return Err(Error::Contract("teacher and student configurations differ".into()));
        }
        let m = self.momentum;
        for (t, s) in self.params.tensors.iter_mut().zip(&student.tensors) {
            if t.shape() != s.shape() {
                return Err(Error::shape("ema_update", format!("{:?} vs {:?}", t.shape(), s.shape())));
            }
            t.data_mut().iter_mut().zip(s.data()).for_each(|(tv, sv)| *tv = m * *tv + (1.0 - m) * sv);
        }
        Ok(())
    }
}
