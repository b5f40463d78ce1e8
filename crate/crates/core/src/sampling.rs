//! Pixel selection for the unsupervised and contrastive losses.
//!
//! Functions work on flat per-pixel slices so a whole mini-batch can be
//! sampled at once.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng as _;

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::proto::PrototypeBank;
use crate::seeds::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    /// Confidence threshold for pixels entering the unsupervised loss.
    pub delta_u: f64,
    /// Indicator threshold for reliable anchors.
    pub delta_w: f64,
    /// Indicator threshold below which a pixel is a hard anchor.
    pub delta_s: f64,
    pub hard_sampling: bool,
    pub anchors_per_class: usize,
    pub negatives_per_anchor: usize,
    pub tau_neg: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            delta_u: 0.75,
            delta_w: 0.75,
            delta_s: 0.25,
            hard_sampling: true,
            anchors_per_class: 64,
            negatives_per_anchor: 32,
            tau_neg: 1.0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("delta_u", self.delta_u), ("delta_w", self.delta_w), ("delta_s", self.delta_s)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("sampling.{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.hard_sampling && self.delta_s > self.delta_w {
            return Err(Error::Config(format!(
                "sampling.delta_s ({}) must not exceed sampling.delta_w ({})",
                self.delta_s, self.delta_w
            )));
        }
        if !(self.tau_neg > 0.0 && self.tau_neg.is_finite()) {
            return Err(Error::Config(format!("sampling.tau_neg must be positive, got {}", self.tau_neg)));
        }
        Ok(())
    }

    /// Tier of a pixel with indicator `s`, if it can be an anchor at all.
    pub fn tier(&self, s: f64) -> Option<Tier> {
        if self.hard_sampling && s < self.delta_s {
            Some(Tier::Hard)
        } else if s >= self.delta_w {
            Some(Tier::Valid)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Hard,
    Valid,
}

/// `fused_valid AND conf >= delta_u`.
pub fn valid_logit_mask(conf: &Tensor, delta_u: f64, fused_valid: &Mask) -> Result<Mask> {
    if conf.len() != fused_valid.data().len() {
        return Err(Error::shape("valid_logit_mask", "confidence and mask differ in size"));
    }
    let data = conf.data().iter().zip(fused_valid.data()).map(|(c, v)| *v && *c >= delta_u).collect();
    Mask::new(fused_valid.height(), fused_valid.width(), data)
}

/// Slice version of [`valid_logit_mask`] for batched pixels.
pub fn valid_logit_pixels(conf: &[f64], delta_u: f64, valid: &[bool]) -> Vec<bool> {
    conf.iter().zip(valid).map(|(c, v)| *v && *c >= delta_u).collect()
}

/// Anchor pixel indices for every class, hard ones first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Anchors {
    pub per_class: Vec<Vec<usize>>,
    pub hard: Vec<usize>,
}

impl Anchors {
    pub fn total(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }
}

fn take(pool: &[usize], amount: usize, rng: &mut Rng) -> Vec<usize> {
    if pool.len() <= amount {
        return pool.to_vec();
    }
    index::sample(rng, pool.len(), amount).into_iter().map(|i| pool[i]).collect()
}

/// Chooses up to `anchors_per_class` anchors per class among valid pixels
/// whose indicator falls in the hard or valid tier.
pub fn select_anchors(
    sim_ind: &[f64],
    labels: &[u8],
    valid: &[bool],
    num_classes: usize,
    cfg: &SamplingConfig,
    rng: &mut Rng,
) -> Result<Anchors> {
    if sim_ind.len() != labels.len() || valid.len() != labels.len() {
        return Err(Error::shape("select_anchors", "indicator, labels and mask differ in length"));
    }
    let mut hard_pool = vec![Vec::new(); num_classes];
    let mut valid_pool = vec![Vec::new(); num_classes];
    for (i, (&s, &c)) in sim_ind.iter().zip(labels).enumerate() {
        let c = c as usize;
        if !valid[i] {
            continue;
        }
        if c >= num_classes {
            return Err(Error::shape("select_anchors", format!("label {c} with {num_classes} classes")));
        }
        match cfg.tier(s) {
            Some(Tier::Hard) => hard_pool[c].push(i),
            Some(Tier::Valid) => valid_pool[c].push(i),
            None => {}
        }
    }
    let m = cfg.anchors_per_class;
    let mut out = Anchors::default();
    for (hard, valid) in hard_pool.iter().zip(&valid_pool) {
        let mut chosen = take(hard, m, rng);
        let h = chosen.len();
        chosen.extend(take(valid, m - h, rng));
        out.hard.push(h);
        out.per_class.push(chosen);
    }
    Ok(out)
}

/// `P(k) ∝ exp(sim(proto_c, proto_k) / tau_neg)` over the classes `k != c`
/// that are initialized and have `available[k]`.
pub fn negative_class_distribution(
    bank: &PrototypeBank,
    class: usize,
    available: &[bool],
    tau_neg: f64,
) -> Result<Vec<(usize, f64)>> {
    let anchor = bank
        .prototype(class)
        .ok_or_else(|| Error::Contract(format!("negatives for uninitialized class {class}")))?;
    let support: Vec<(usize, f64)> = (0..bank.num_classes())
        .filter(|&k| k != class && available.get(k).copied().unwrap_or(false))
        .filter_map(|k| bank.prototype(k).map(|p| (k, p.iter().zip(anchor).map(|(a, b)| a * b).sum::<f64>())))
        .collect();
    let max = support.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = support.iter().map(|(_, s)| ((s - max) / tau_neg).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(support.iter().zip(weights).map(|((k, _), w)| (*k, w / total)).collect())
}

/// Draws `negatives_per_anchor` pixel indices (with replacement) from the
/// other classes' pools. Returns nothing when no other class is available.
pub fn sample_negatives(
    bank: &PrototypeBank,
    class: usize,
    pools: &[Vec<usize>],
    cfg: &SamplingConfig,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let available: Vec<bool> = pools.iter().map(|p| !p.is_empty()).collect();
    let dist = negative_class_distribution(bank, class, &available, cfg.tau_neg)?;
    if dist.is_empty() || cfg.negatives_per_anchor == 0 {
        return Ok(Vec::new());
    }
    let picker = WeightedIndex::new(dist.iter().map(|d| d.1))
        .map_err(|e| Error::Contract(format!("negative class weights: {e}")))?;
    Ok((0..cfg.negatives_per_anchor)
        .map(|_| {
            let pool = &pools[dist[picker.sample(rng)].0];
            pool[rng.random_range(0..pool.len())]
        })
        .collect())
}

/// Per-epoch sampling counters.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingStats {
    pub hard: Vec<u64>,
    pub valid: Vec<u64>,
    pub indicator_sum: Vec<f64>,
    pub negatives: Vec<u64>,
}

impl SamplingStats {
    pub fn new(num_classes: usize) -> Self {
        SamplingStats {
            hard: vec![0; num_classes],
            valid: vec![0; num_classes],
            indicator_sum: vec![0.0; num_classes],
            negatives: vec![0; num_classes],
        }
    }

    pub fn record_anchors(&mut self, anchors: &Anchors, sim_ind: &[f64]) {
        for (c, list) in anchors.per_class.iter().enumerate() {
            self.hard[c] += anchors.hard[c] as u64;
            self.valid[c] += (list.len() - anchors.hard[c]) as u64;
            self.indicator_sum[c] += list.iter().map(|&i| sim_ind[i]).sum::<f64>();
        }
    }

    pub fn record_negatives(&mut self, labels: &[u8], negatives: &[usize]) {
        for &i in negatives {
            self.negatives[labels[i] as usize] += 1;
        }
    }

    pub const CSV_HEADER: &'static str = "epoch,class_id,hard_anchors,valid_anchors,mean_anchor_indicator,negatives";

    /// One CSV row per class.
    pub fn csv_rows(&self, epoch: usize) -> Vec<String> {
        (0..self.hard.len())
            .map(|c| {
                let n = self.hard[c] + self.valid[c];
                let mean = if n == 0 { 0.0 } else { self.indicator_sum[c] / n as f64 };
                format!("{epoch},{c},{},{},{mean:.6},{}", self.hard[c], self.valid[c], self.negatives[c])
            })
            .collect()
    }
}
