//! Cross-entropy terms, the prototype contrastive term, their weighted sum,
//! and the learning-rate schedule.

use crate::error::{Error, Result};
use crate::grad::{NodeId, Tape, Tensor};
use crate::proto::PrototypeBank;

/// Default temperature shared by the similarity indicator and the contrastive loss.
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_LAMBDA_C: f64 = 0.1;
pub const POLY_POWER: f64 = 0.9;

/// Mean of `-log softmax(logits[i])[labels[i]]` over rows with `mask[i]`.
/// Returns a constant zero when no row is selected.
fn masked_cross_entropy(tape: &mut Tape, logits: NodeId, labels: &[u8], mask: Option<&[bool]>) -> Result<(NodeId, usize)> {
    let shape = tape.value(logits).shape().to_vec();
    let &[rows, classes] = shape.as_slice() else {
        return Err(Error::shape("cross_entropy", format!("logits must be [N, C], got {shape:?}")));
    };
    if labels.len() != rows || mask.is_some_and(|m| m.len() != rows) {
        return Err(Error::shape("cross_entropy", format!("{rows} rows, {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::shape("cross_entropy", format!("label {bad} with {classes} classes")));
    }
    let selected: Vec<usize> = (0..rows).filter(|&i| mask.is_none_or(|m| m[i])).collect();
    if selected.is_empty() {
        return Ok((tape.constant(Tensor::scalar(0.0)), 0));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let chosen = if selected.len() == rows { logp } else { tape.gather_rows(logp, selected.clone())? };
    let picked = tape.pick(chosen, selected.iter().map(|&i| labels[i] as usize).collect())?;
    let mean = tape.mean(picked);
    Ok((tape.scale(mean, -1.0), selected.len()))
}

/// Mean cross-entropy over all labeled pixels.
pub fn supervised_loss(tape: &mut Tape, logits: NodeId, labels: &[u8]) -> Result<NodeId> {
    if labels.is_empty() {
        return Err(Error::Contract("supervised loss needs at least one labeled pixel".into()));
    }
    Ok(masked_cross_entropy(tape, logits, labels, None)?.0)
}

/// Mean cross-entropy over the masked pixels, zero when the mask is empty.
pub fn unsupervised_loss(tape: &mut Tape, logits: NodeId, labels: &[u8], mask: &[bool]) -> Result<NodeId> {
    Ok(masked_cross_entropy(tape, logits, labels, Some(mask))?.0)
}

/// One anchor row of the representation matrix with its class and sampled
/// negative rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub row: usize,
    pub class: usize,
    pub negatives: Vec<usize>,
}

/// Prototype InfoNCE over `anchors`. `reps` is `[N, d]` with unit rows;
/// prototypes enter as constants. Each anchor is weighted by
/// `1 / (classes with anchors * anchors of its class)`.
pub fn contrastive_loss(tape: &mut Tape, reps: NodeId, anchors: &[Anchor], bank: &PrototypeBank, tau: f64) -> Result<NodeId> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("contrastive temperature must be positive, got {tau}")));
    }
    let shape = tape.value(reps).shape().to_vec();
    let &[rows, dim] = shape.as_slice() else {
        return Err(Error::shape("contrastive_loss", format!("reps must be [N, d], got {shape:?}")));
    };
    if dim != bank.dim() {
        return Err(Error::shape("contrastive_loss", format!("reps dim {dim}, bank dim {}", bank.dim())));
    }
    let mut per_class = vec![0usize; bank.num_classes()];
    for a in anchors {
        if a.class >= bank.num_classes() || !bank.is_initialized(a.class) {
            return Err(Error::Contract(format!("anchor class {} has no prototype", a.class)));
        }
        if a.row >= rows || a.negatives.iter().any(|&r| r >= rows) {
            return Err(Error::shape("contrastive_loss", format!("anchor or negative row out of {rows}")));
        }
        per_class[a.class] += 1;
    }
    let active_classes = per_class.iter().filter(|&&n| n > 0).count();

    // anchors without negatives contribute -log(1) = 0; anchors are grouped by
    // negative count so each group forms a rectangular logit matrix
    let mut groups: std::collections::BTreeMap<usize, Vec<&Anchor>> = Default::default();
    for a in anchors.iter().filter(|a| !a.negatives.is_empty()) {
        groups.entry(a.negatives.len()).or_default().push(a);
    }
    if groups.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }

    let protos = Tensor::from_fn([dim, bank.num_classes()], |i| {
        let (k, c) = (i / bank.num_classes(), i % bank.num_classes());
        bank.prototype(c).map_or(0.0, |p| p[k])
    });
    let protos = tape.constant(protos);
    let mut terms = Vec::new();
    for (n_neg, group) in groups {
        let k = group.len();
        let anchor_rows = tape.gather_rows(reps, group.iter().map(|a| a.row).collect())?;
        let all_pos = tape.matmul(anchor_rows, protos)?;
        let pos = tape.pick(all_pos, group.iter().map(|a| a.class).collect())?;
        let pos = tape.reshape(pos, [k, 1])?;

        let repeated = tape.gather_rows(reps, group.iter().flat_map(|a| std::iter::repeat_n(a.row, n_neg)).collect())?;
        let negs = tape.gather_rows(reps, group.iter().flat_map(|a| a.negatives.iter().copied()).collect())?;
        let prod = tape.mul(repeated, negs)?;
        let neg = tape.reduce(prod, crate::grad::Reduction::Sum, Some(1))?;
        let neg = tape.reshape(neg, [k, n_neg])?;

        let logits = tape.concat(&[pos, neg], 1)?;
        let logits = tape.scale(logits, 1.0 / tau);
        let logp = tape.log_softmax(logits, 1)?;
        let log_pos = tape.pick(logp, vec![0; k])?;
        let weights = Tensor::new([k], group.iter().map(|a| -1.0 / (active_classes * per_class[a.class]) as f64).collect())?;
        let weights = tape.constant(weights);
        let weighted = tape.mul(log_pos, weights)?;
        terms.push(tape.sum(weighted));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// `supervised + unsupervised + lambda_c * contrastive`.
pub fn total_loss(tape: &mut Tape, supervised: NodeId, unsupervised: NodeId, contrastive: NodeId, lambda_c: f64) -> Result<NodeId> {
    if !(lambda_c >= 0.0 && lambda_c.is_finite()) {
        return Err(Error::Config(format!("lambda_c must be non-negative, got {lambda_c}")));
    }
    let su = tape.add(supervised, unsupervised)?;
    let c = tape.scale(contrastive, lambda_c);
    tape.add(su, c)
}

/// `lr_base * (1 - epoch / total_epochs)^0.9`; `epoch` may be fractional.
pub fn poly_lr(lr_base: f64, epoch: f64, total_epochs: f64) -> Result<f64> {
    if total_epochs.is_nan() || total_epochs <= 0.0 || !(0.0..=total_epochs).contains(&epoch) {
        return Err(Error::Contract(format!("poly schedule needs 0 <= epoch <= total, got {epoch} of {total_epochs}")));
    }
    Ok(lr_base * (1.0 - epoch / total_epochs).powf(POLY_POWER))
}

/// Loss values and pixel counts of one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub supervised: f64,
    pub unsupervised: f64,
    pub contrastive: f64,
    pub total: f64,
    pub labeled_pixels: usize,
    pub unlabeled_pixels: usize,
    pub anchors: usize,
}

impl LossReport {
    pub const CSV_COLUMNS: &'static str = "loss_s,loss_u,loss_c,loss_total,labeled_pixels,unlabeled_pixels,anchors";

    pub fn csv(&self) -> String {
        format!(
            "{:.9},{:.9},{:.9},{:.9},{},{},{}",
            self.supervised, self.unsupervised, self.contrastive, self.total, self.labeled_pixels, self.unlabeled_pixels, self.anchors
        )
    }

    /// Running sum for averaging over an epoch.
    pub fn accumulate(&mut self, other: &LossReport) {
        self.supervised += other.supervised;
        self.unsupervised += other.unsupervised;
        self.contrastive += other.contrastive;
        self.total += other.total;
        self.labeled_pixels += other.labeled_pixels;
        self.unlabeled_pixels += other.unlabeled_pixels;
        self.anchors += other.anchors;
    }

    pub fn scaled(&self, factor: f64) -> LossReport {
        LossReport {
            supervised: self.supervised * factor,
            unsupervised: self.unsupervised * factor,
            contrastive: self.contrastive * factor,
            total: self.total * factor,
            ..self.clone()
        }
    }
}
