//! Segmentation scores, pseudo-label quality, and indicator diagnostics.

use std::fmt::Write as _;

use crate::data::{LabelMap, Mask};
use crate::error::{Error, Result};
use crate::grad::Tensor;

/// Row = ground truth, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds the pixels selected by `mask` (all when `None`).
    pub fn add(&mut self, pred: &[u8], truth: &[u8], mask: Option<&[bool]>) -> Result<()> {
        if pred.len() != truth.len() || mask.is_some_and(|m| m.len() != pred.len()) {
            return Err(Error::shape("confusion", "prediction, truth and mask differ in length"));
        }
        let c = self.num_classes;
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= c || t >= c {
                return Err(Error::shape("confusion", format!("class {} with {c} classes", p.max(t))));
            }
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn add_maps(&mut self, pred: &LabelMap, truth: &LabelMap, mask: Option<&Mask>) -> Result<()> {
        self.add(pred.data(), truth.data(), mask.map(Mask::data))
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion", "merging matrices of different class counts"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// IoU per class; `None` when the class has zero union.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).map(|p| self.get(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|t| self.get(t, k)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn score(&self) -> IouScore {
        let per_class = self.per_class_iou();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        IouScore { per_class, miou }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouScore {
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with non-zero union; 0 when there are none.
    pub miou: f64,
}

pub fn miou(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<IouScore> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::shape("miou", "prediction and truth differ in size"));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add_maps(pred, truth, None)?;
    Ok(cm.score())
}

/// Where a pseudo-label and its sampling mask come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSource {
    Logit,
    Representation,
    Mix,
}

impl LabelSource {
    pub const ALL: [LabelSource; 3] = [LabelSource::Logit, LabelSource::Representation, LabelSource::Mix];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Logit => "lgt",
            LabelSource::Representation => "rep",
            LabelSource::Mix => "mix",
        }
    }
}

/// Confusion matrices of the three pseudo-label sources on their own
/// sampled pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelQuality {
    pub logit: ConfusionMatrix,
    pub representation: ConfusionMatrix,
    pub mix: ConfusionMatrix,
}

impl PseudoLabelQuality {
    pub fn new(num_classes: usize) -> Self {
        PseudoLabelQuality {
            logit: ConfusionMatrix::new(num_classes),
            representation: ConfusionMatrix::new(num_classes),
            mix: ConfusionMatrix::new(num_classes),
        }
    }

    pub fn source(&self, s: LabelSource) -> &ConfusionMatrix {
        match s {
            LabelSource::Logit => &self.logit,
            LabelSource::Representation => &self.representation,
            LabelSource::Mix => &self.mix,
        }
    }

    /// Accumulates one image. Each source is scored on the pixels its mask
    /// selects. The mix mask must lie inside the agreement set.
    #[allow(clippy::too_many_arguments)]
    pub fn add(
        &mut self,
        y_lgt: &LabelMap,
        lgt_mask: &Mask,
        y_rep: &LabelMap,
        rep_mask: &Mask,
        y_mix: &LabelMap,
        mix_mask: &Mask,
        truth: &LabelMap,
    ) -> Result<()> {
        let agree = y_lgt.data().iter().zip(y_rep.data()).map(|(a, b)| a == b).collect();
        let agree = Mask::new(y_lgt.height(), y_lgt.width(), agree)?;
        if !mix_mask.is_subset_of(&agree) {
            return Err(Error::Contract("mix mask selects pixels where the two spaces disagree".into()));
        }
        self.logit.add_maps(y_lgt, truth, Some(lgt_mask))?;
        self.representation.add_maps(y_rep, truth, Some(rep_mask))?;
        self.mix.add_maps(y_mix, truth, Some(mix_mask))?;
        Ok(())
    }

    pub const CSV_HEADER: &'static str = "source,class_id,iou";

    /// Rows `source,class_id,iou` with a `miou` row per source, followed by
    /// `mix_minus_lgt` deltas. Classes with zero union are written empty.
    pub fn csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        let scores: Vec<IouScore> = LabelSource::ALL.iter().map(|s| self.source(*s).score()).collect();
        for (s, score) in LabelSource::ALL.iter().zip(&scores) {
            for (c, iou) in score.per_class.iter().enumerate() {
                let _ = writeln!(out, "{},{c},{}", s.as_str(), fmt_opt(*iou));
            }
            let _ = writeln!(out, "{},miou,{:.6}", s.as_str(), score.miou);
        }
        let (lgt, mix) = (&scores[0], &scores[2]);
        for (c, (l, m)) in lgt.per_class.iter().zip(&mix.per_class).enumerate() {
            let delta = l.zip(*m).map(|(l, m)| m - l);
            let _ = writeln!(out, "mix_minus_lgt,{c},{}", fmt_opt(delta));
        }
        let _ = writeln!(out, "mix_minus_lgt,miou,{:.6}", mix.miou - lgt.miou);
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Confidence-vs-cosine pairs with per-class binned means.
#[derive(Clone, Debug, PartialEq)]
pub struct IndicatorDiagnostics {
    pub bins: usize,
    /// `(class, confidence, cosine)`.
    pub pairs: Vec<(u8, f64, f64)>,
}

impl IndicatorDiagnostics {
    pub fn new(bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Config("indicator diagnostics need at least one bin".into()));
        }
        Ok(IndicatorDiagnostics { bins, pairs: Vec::new() })
    }

    pub fn add(&mut self, conf: &Tensor, cosine: &Tensor, labels: &LabelMap) -> Result<()> {
        if conf.len() != labels.len() || cosine.len() != labels.len() {
            return Err(Error::shape("indicator_diagnostics", "inputs differ in size"));
        }
        for ((&c, &s), &l) in conf.data().iter().zip(cosine.data()).zip(labels.data()) {
            self.pairs.push((l, c, s));
        }
        Ok(())
    }

    /// Bin of a confidence in `[0, 1]`; 1.0 falls in the last bin.
    pub fn bin_of(&self, confidence: f64) -> usize {
        ((confidence * self.bins as f64).floor().max(0.0) as usize).min(self.bins - 1)
    }

    /// `(class, bin, mean_cosine, count)` for every occupied cell, ordered.
    pub fn binned(&self) -> Vec<(u8, usize, f64, usize)> {
        let mut cells: std::collections::BTreeMap<(u8, usize), (f64, usize)> = Default::default();
        for &(class, conf, cos) in &self.pairs {
            let e = cells.entry((class, self.bin_of(conf))).or_default();
            e.0 += cos;
            e.1 += 1;
        }
        cells.into_iter().map(|((c, b), (sum, n))| (c, b, sum / n as f64, n)).collect()
    }

    pub fn pairs_csv(&self) -> String {
        let mut out = String::from("class_id,confidence,cosine\n");
        for (c, conf, cos) in &self.pairs {
            let _ = writeln!(out, "{c},{conf:.6},{cos:.6}");
        }
        out
    }

    pub fn bins_csv(&self) -> String {
        let mut out = String::from("class_id,bin,mean_cosine,count\n");
        for (c, b, mean, n) in self.binned() {
            let _ = writeln!(out, "{c},{b},{mean:.6},{n}");
        }
        out
    }
}
