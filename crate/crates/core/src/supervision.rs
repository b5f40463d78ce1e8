//! Pseudo-labels and reliability indicators from both spaces, and the two
//! ways of combining them.
//!
//! All inputs here are teacher outputs in channel-major layout.

use crate::data::{LabelMap, Mask};
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::proto::PrototypeBank;

/// Logit-space labels and their softmax confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitLabels {
    pub labels: LabelMap,
    /// `[H, W]`, max softmax probability.
    pub confidence: Tensor,
}

fn planar_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(op, format!("expected [C,H,W], got {s:?}"))),
    }
}

/// Argmax class (lowest id on ties) and max softmax probability per pixel.
pub fn logit_pseudo_labels(logits: &Tensor) -> Result<LogitLabels> {
    let (c, h, w) = planar_dims(logits, "logit_pseudo_labels")?;
    if c > 256 {
        return Err(Error::shape("logit_pseudo_labels", format!("{c} classes do not fit a label map")));
    }
    let hw = h * w;
    let data = logits.data();
    let mut labels = vec![0u8; hw];
    let mut conf = vec![0.0; hw];
    for p in 0..hw {
        let mut best = 0;
        for k in 1..c {
            if data[k * hw + p] > data[best * hw + p] {
                best = k;
            }
        }
        let max = data[best * hw + p];
        let total: f64 = (0..c).map(|k| (data[k * hw + p] - max).exp()).sum();
        labels[p] = best as u8;
        conf[p] = 1.0 / total;
    }
    Ok(LogitLabels { labels: LabelMap::new(h, w, labels)?, confidence: Tensor::new([h, w], conf)? })
}

/// Nearest initialized prototype by cosine (lowest id on ties).
pub fn rep_pseudo_labels(reps: &Tensor, bank: &PrototypeBank) -> Result<LabelMap> {
    let (_, h, w) = planar_dims(reps, "rep_pseudo_labels")?;
    let classes = bank.initialized_classes();
    if classes.is_empty() {
        return Err(Error::Contract("representation pseudo-labels need at least one initialized prototype".into()));
    }
    let sims = bank.similarities(reps)?;
    let n = h * w;
    let s = sims.data();
    let labels = (0..n)
        .map(|p| {
            let mut best = classes[0];
            for &c in &classes[1..] {
                if s[c * n + p] > s[best * n + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}

/// Softmax of `sims / tau`, max-subtracted. Entry `k` is the indicator value
/// when class `k` is the assigned class.
pub fn indicator_distribution(sims: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// Softmax-of-cosine reliability of each pixel's assigned class against all
/// initialized prototypes. Pixels assigned to an uninitialized class get 0.
pub fn similarity_indicator(reps: &Tensor, bank: &PrototypeBank, assigned: &LabelMap, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let (_, h, w) = planar_dims(reps, "similarity_indicator")?;
    if assigned.height() != h || assigned.width() != w {
        return Err(Error::shape("similarity_indicator", "assigned labels do not match representations"));
    }
    let classes = bank.initialized_classes();
    let sims = bank.similarities(reps)?;
    let (s, n) = (sims.data(), h * w);
    let mut out = vec![0.0; n];
    for (p, o) in out.iter_mut().enumerate() {
        let a = assigned.data()[p] as usize;
        if !bank.is_initialized(a) {
            continue;
        }
        let max = classes.iter().map(|&c| s[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = classes.iter().map(|&c| ((s[c * n + p] - max) / tau).exp()).sum();
        *o = ((s[a * n + p] - max) / tau).exp() / total;
    }
    Tensor::new([h, w], out)
}

/// Per-pixel softmax over the class axis of `[C, H, W]` logits.
pub fn class_probabilities(logits: &Tensor) -> Result<Tensor> {
    let (c, h, w) = planar_dims(logits, "class_probabilities")?;
    let hw = h * w;
    let d = logits.data();
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        let max = (0..c).map(|k| d[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..c).map(|k| (d[k * hw + p] - max).exp()).sum();
        for k in 0..c {
            out[k * hw + p] = (d[k * hw + p] - max).exp() / total;
        }
    }
    Tensor::new([c, h, w], out)
}

/// Similarity indicator for every candidate assigned class: `[C, H, W]`,
/// zero for uninitialized classes. Entry `(c, p)` equals
/// [`similarity_indicator`] at `p` with `c` assigned.
pub fn indicator_table(reps: &Tensor, bank: &PrototypeBank, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let (_, h, w) = planar_dims(reps, "indicator_table")?;
    let classes = bank.initialized_classes();
    let sims = bank.similarities(reps)?;
    let (s, n, c) = (sims.data(), h * w, bank.num_classes());
    let mut out = vec![0.0; c * n];
    for p in 0..n {
        let max = classes.iter().map(|&k| s[k * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = classes.iter().map(|&k| ((s[k * n + p] - max) / tau).exp()).sum();
        for &k in &classes {
            out[k * n + p] = ((s[k * n + p] - max) / tau).exp() / total;
        }
    }
    Tensor::new([c, h, w], out)
}

/// `table[labels[p], p]` for a `[C, H, W]` table.
pub fn lookup(table: &Tensor, labels: &LabelMap) -> Result<Tensor> {
    let (c, h, w) = planar_dims(table, "lookup")?;
    if labels.height() != h || labels.width() != w {
        return Err(Error::shape("lookup", "labels do not match the table"));
    }
    let n = h * w;
    let data = labels
        .data()
        .iter()
        .enumerate()
        .map(|(p, &l)| if (l as usize) < c { Ok(table.data()[l as usize * n + p]) } else { Err(Error::shape("lookup", format!("label {l} with {c} classes"))) })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new([h, w], data)
}

/// Raw cosine between each pixel and its assigned class prototype
/// (uninitialized classes report the bank's sentinel).
pub fn assigned_cosine(reps: &Tensor, bank: &PrototypeBank, assigned: &LabelMap) -> Result<Tensor> {
    let (_, h, w) = planar_dims(reps, "assigned_cosine")?;
    let sims = bank.similarities(reps)?;
    let n = h * w;
    Tensor::new([h, w], (0..n).map(|p| sims.data()[assigned.data()[p] as usize * n + p]).collect())
}

/// A label map with the pixels allowed to supervise.
#[derive(Clone, Debug, PartialEq)]
pub struct Fused {
    pub labels: LabelMap,
    pub valid: Mask,
}

fn same_dims(a: &LabelMap, b: &LabelMap, op: &'static str) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(op, "label maps differ in size"));
    }
    Ok(())
}

/// Keeps only pixels where both spaces agree.
pub fn fuse_mix(y_lgt: &LabelMap, y_rep: &LabelMap) -> Result<Fused> {
    same_dims(y_lgt, y_rep, "fuse_mix")?;
    let valid = y_lgt.data().iter().zip(y_rep.data()).map(|(a, b)| a == b).collect();
    Ok(Fused { labels: y_lgt.clone(), valid: Mask::new(y_lgt.height(), y_lgt.width(), valid)? })
}

/// Supervision for each space taken from the other one.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossFused {
    /// Representation-space labels, valid where the similarity indicator is at least `delta_w`.
    pub for_logit: Fused,
    /// Logit-space labels, valid where the confidence is at least `delta_u`.
    pub for_rep: Fused,
}

pub fn fuse_cross(
    y_lgt: &LabelMap,
    y_rep: &LabelMap,
    conf: &Tensor,
    sim_ind: &Tensor,
    delta_u: f64,
    delta_w: f64,
) -> Result<CrossFused> {
    same_dims(y_lgt, y_rep, "fuse_cross")?;
    let (h, w) = (y_lgt.height(), y_lgt.width());
    if conf.len() != h * w || sim_ind.len() != h * w {
        return Err(Error::shape("fuse_cross", "indicator maps do not match labels"));
    }
    if delta_w > 1.0 || delta_u > 1.0 {
        log::warn!("cross fusion threshold above 1 (delta_u={delta_u}, delta_w={delta_w}) leaves a space unsupervised");
    }
    let gate = |ind: &Tensor, delta: f64| Mask::new(h, w, ind.data().iter().map(|v| *v >= delta).collect());
    Ok(CrossFused {
        for_logit: Fused { labels: y_rep.clone(), valid: gate(sim_ind, delta_w)? },
        for_rep: Fused { labels: y_lgt.clone(), valid: gate(conf, delta_u)? },
    })
}

/// Everything the teacher says about one unlabeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBundle {
    pub y_lgt: LabelMap,
    pub conf: Tensor,
    pub y_rep: LabelMap,
    /// Indicator of `y_rep` against all initialized prototypes.
    pub sim_ind: Tensor,
    /// Cosine to the prototype of `y_rep` (diagnostics).
    pub cosine: Tensor,
    pub mix: Fused,
    pub cross: CrossFused,
    /// `[C, H, W]` teacher class probabilities.
    pub probs: Tensor,
    /// `[C, H, W]` similarity indicator per candidate class.
    pub indicators: Tensor,
}

impl PseudoLabelBundle {
    pub fn compute(
        logits: &Tensor,
        reps: &Tensor,
        bank: &PrototypeBank,
        tau: f64,
        delta_u: f64,
        delta_w: f64,
    ) -> Result<Self> {
        let LogitLabels { labels: y_lgt, confidence: conf } = logit_pseudo_labels(logits)?;
        let y_rep = rep_pseudo_labels(reps, bank)?;
        let indicators = indicator_table(reps, bank, tau)?;
        let sim_ind = lookup(&indicators, &y_rep)?;
        let cosine = assigned_cosine(reps, bank, &y_rep)?;
        let mix = fuse_mix(&y_lgt, &y_rep)?;
        let cross = fuse_cross(&y_lgt, &y_rep, &conf, &sim_ind, delta_u, delta_w)?;
        let probs = class_probabilities(logits)?;
        Ok(PseudoLabelBundle { y_lgt, conf, y_rep, sim_ind, cosine, mix, cross, probs, indicators })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(values: &[f64]) -> Tensor {
        Tensor::new([values.len(), 1, 1], values.to_vec()).unwrap()
    }

    fn labels(h: usize, w: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(h, w, v.to_vec()).unwrap()
    }

    fn rep(v: &[f64]) -> Tensor {
        Tensor::new([v.len(), 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn logit_label_examples() {
        let out = logit_pseudo_labels(&logits(&[0.1, 2.0, -1.0])).unwrap();
        assert_eq!(out.labels.data(), &[1]);
        let tie = logit_pseudo_labels(&logits(&[0.5, 3.0, 3.0])).unwrap();
        assert_eq!(tie.labels.data(), &[1]);
        let c = logit_pseudo_labels(&logits(&[2.0, 0.0, 0.0])).unwrap();
        let e2 = 2f64.exp();
        assert!((c.confidence.data()[0] - e2 / (e2 + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn rep_label_examples() {
        let mut bank = PrototypeBank::new(5, 4, 0.9).unwrap();
        for c in 0..5 {
            let mut v = vec![0.0; 4];
            v[c % 4] = 1.0;
            if c != 4 {
                bank.set_prototype(c, &v).unwrap();
            }
        }
        assert_eq!(rep_pseudo_labels(&rep(&[0.0, 0.0, 0.0, 1.0]), &bank).unwrap().data(), &[3]);

        let mut bank = PrototypeBank::new(3, 2, 0.9).unwrap();
        bank.set_prototype(0, &[0.6, 0.8]).unwrap();
        bank.set_prototype(1, &[1.0, 0.0]).unwrap();
        // class 2 stays uninitialized (sentinel row) and must never win
        assert_eq!(rep_pseudo_labels(&rep(&[1.0, 0.0]), &bank).unwrap().data(), &[1]);
        assert_eq!(rep_pseudo_labels(&rep(&[-1.0, 0.0]), &bank).unwrap().data(), &[0]);
    }

    #[test]
    fn rep_labels_need_a_prototype() {
        let bank = PrototypeBank::new(3, 2, 0.9).unwrap();
        assert!(matches!(rep_pseudo_labels(&rep(&[1.0, 0.0]), &bank), Err(Error::Contract(_))));
    }

    #[test]
    fn indicator_examples() {
        let mut bank = PrototypeBank::new(3, 2, 0.9).unwrap();
        bank.set_prototype(1, &[1.0, 0.0]).unwrap();
        let one = similarity_indicator(&rep(&[0.0, 1.0]), &bank, &labels(1, 1, &[1]), 0.5).unwrap();
        assert_eq!(one.data(), &[1.0]);

        let d = indicator_distribution(&[0.2, 0.2, 0.2, 0.2], 0.5).unwrap();
        assert!(d.iter().all(|v| (v - 0.25).abs() < 1e-15));

        let d = indicator_distribution(&[0.9, 0.3, -0.2], 0.5).unwrap();
        let (a, b, c) = (1.8f64.exp(), 0.6f64.exp(), (-0.4f64).exp());
        assert!((d[0] - a / (a + b + c)).abs() < 1e-15);
        assert!((d[0] - 0.708).abs() < 1e-3);
    }

    #[test]
    fn indicator_rejects_bad_tau() {
        let mut bank = PrototypeBank::new(2, 2, 0.9).unwrap();
        bank.set_prototype(0, &[1.0, 0.0]).unwrap();
        assert!(matches!(similarity_indicator(&rep(&[1.0, 0.0]), &bank, &labels(1, 1, &[0]), 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn table_agrees_with_indicator() {
        let mut bank = PrototypeBank::new(4, 2, 0.9).unwrap();
        bank.set_prototype(0, &[1.0, 0.0]).unwrap();
        bank.set_prototype(2, &[0.6, 0.8]).unwrap();
        bank.set_prototype(3, &[-1.0, 0.2]).unwrap();
        let reps = Tensor::new([2, 1, 3], vec![1.0, 0.0, 0.8, 0.0, 1.0, -0.6]).unwrap();
        let table = indicator_table(&reps, &bank, 0.5).unwrap();
        for class in 0..4u8 {
            let assigned = labels(1, 3, &[class; 3]);
            let direct = similarity_indicator(&reps, &bank, &assigned, 0.5).unwrap();
            assert_eq!(lookup(&table, &assigned).unwrap(), direct);
        }
    }

    #[test]
    fn probabilities_match_confidence() {
        let l = Tensor::new([3, 1, 2], vec![0.1, 2.0, 2.0, 0.0, -1.0, 0.0]).unwrap();
        let probs = class_probabilities(&l).unwrap();
        let out = logit_pseudo_labels(&l).unwrap();
        assert_eq!(lookup(&probs, &out.labels).unwrap(), out.confidence);
    }

    #[test]
    fn mix_examples() {
        let a = labels(2, 2, &[1, 2, 0, 0]);
        let same = fuse_mix(&a, &a).unwrap();
        assert_eq!(same.valid.count(), 4);
        assert_eq!(same.labels, a);

        let disagree = fuse_mix(&a, &labels(2, 2, &[0, 0, 1, 1])).unwrap();
        assert_eq!(disagree.valid.count(), 0);

        let f = fuse_mix(&a, &labels(2, 2, &[1, 3, 0, 1])).unwrap();
        assert_eq!(f.valid.data(), &[true, false, true, false]);
        assert_eq!(f.labels.get(0, 0), 1);
        assert_eq!(f.labels.get(1, 0), 0);
    }

    #[test]
    fn cross_examples() {
        let lgt = labels(1, 2, &[1, 2]);
        let rep = labels(1, 2, &[3, 0]);
        let conf = Tensor::new([1, 2], vec![0.9, 0.5]).unwrap();
        let sim = Tensor::new([1, 2], vec![0.2, 0.8]).unwrap();

        let open = fuse_cross(&lgt, &rep, &conf, &sim, 0.0, 0.0).unwrap();
        assert_eq!(open.for_logit.labels, rep);
        assert_eq!(open.for_rep.labels, lgt);
        assert_eq!(open.for_logit.valid.count() + open.for_rep.valid.count(), 4);

        let closed = fuse_cross(&lgt, &rep, &conf, &sim, 0.0, 1.0 + 1e-9).unwrap();
        assert_eq!(closed.for_logit.valid.count(), 0);

        let gated = fuse_cross(&lgt, &rep, &conf, &sim, 0.75, 0.5).unwrap();
        assert_eq!(gated.for_rep.valid.data(), &[true, false]);
        // the logit space is gated by the representation-space indicator
        assert_eq!(gated.for_logit.valid.data(), &[false, true]);
    }
}
