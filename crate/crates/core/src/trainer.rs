//! The training loop: supervised warm-up, teacher EMA, prototype upkeep,
//! pseudo-label wiring, SGD, evaluation, and the ablation sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::SliceRandom;

use crate::data::{augment_with, AugmentParams, DatasetSplit, LabelMap, Mask, SegSample};
use crate::error::{Error, Result};
use crate::grad::{sgd_step, Tape, Tensor};
use crate::io;
use crate::losses::{contrastive_loss, poly_lr, supervised_loss, total_loss, unsupervised_loss, Anchor, LossReport};
use crate::metrics::{ConfusionMatrix, IndicatorDiagnostics, IouScore, PseudoLabelQuality};
use crate::model::{forward_batch, forward_many, ForwardOutput, ModelConfig, ModelParams, TeacherState, PARAM_NAMES};
use crate::proto::{CentroidSums, PrototypeBank};
use crate::sampling::{sample_negatives, select_anchors, valid_logit_pixels, SamplingConfig, SamplingStats};
use crate::seeds::{rng_for, Rng};
use crate::supervision::{class_probabilities, indicator_table, logit_pseudo_labels, lookup, PseudoLabelBundle};

/// Which pseudo-labels supervise the unlabeled losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    SupervisedOnly,
    LgtOnly,
    RepOnly,
    Mix,
    Cross,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::SupervisedOnly, Strategy::LgtOnly, Strategy::RepOnly, Strategy::Mix, Strategy::Cross];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::SupervisedOnly => "supervised_only",
            Strategy::LgtOnly => "lgt_only",
            Strategy::RepOnly => "rep_only",
            Strategy::Mix => "mix",
            Strategy::Cross => "cross",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}` (expected one of supervised_only, lgt_only, rep_only, mix, cross)")))
    }
}

/// Which reliability indicator gates each space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IndicatorMode {
    /// Softmax confidence for both spaces.
    Conf,
    /// Similarity indicator for both spaces.
    Smlr,
    /// Confidence for the logit space, similarity for the representation space.
    Mix,
}

impl IndicatorMode {
    pub const ALL: [IndicatorMode; 3] = [IndicatorMode::Conf, IndicatorMode::Smlr, IndicatorMode::Mix];

    pub fn as_str(self) -> &'static str {
        match self {
            IndicatorMode::Conf => "conf",
            IndicatorMode::Smlr => "smlr",
            IndicatorMode::Mix => "mix",
        }
    }

    fn logit_uses_similarity(self) -> bool {
        self == IndicatorMode::Smlr
    }

    fn rep_uses_similarity(self) -> bool {
        self != IndicatorMode::Conf
    }
}

impl FromStr for IndicatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        IndicatorMode::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown indicator mode `{s}` (expected conf, smlr or mix)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size_labeled: usize,
    pub batch_size_unlabeled: usize,
    pub lr_base: f64,
    pub teacher_momentum: f64,
    /// Prototype EMA rate.
    pub alpha: f64,
    /// Temperature of the similarity indicator.
    pub tau_indicator: f64,
    /// Temperature of the contrastive loss.
    pub tau_contrastive: f64,
    pub lambda_c: f64,
    pub sampling: SamplingConfig,
    pub strategy: Strategy,
    pub indicator: IndicatorMode,
    pub eval_every: usize,
    pub model_width: usize,
    pub rep_dim: usize,
    /// Score pseudo-labels against held unlabeled ground truth at evaluation
    /// points (evaluation only; never feeds training).
    pub track_pseudo_quality: bool,
    /// Unlabeled images written to `dumps/` at the end of a run.
    pub dump_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            total_epochs: 40,
            warmup_epochs: 4,
            batch_size_labeled: 4,
            batch_size_unlabeled: 4,
            lr_base: 0.05,
            teacher_momentum: 0.99,
            alpha: 0.99,
            tau_indicator: crate::losses::DEFAULT_TAU,
            tau_contrastive: crate::losses::DEFAULT_TAU,
            lambda_c: crate::losses::DEFAULT_LAMBDA_C,
            sampling: SamplingConfig::default(),
            strategy: Strategy::Mix,
            indicator: IndicatorMode::Mix,
            eval_every: 10,
            model_width: 16,
            rep_dim: 16,
            track_pseudo_quality: true,
            dump_images: 4,
        }
    }
}

impl TrainConfig {
    /// Warm-up of 10% of the schedule, at least one epoch.
    pub fn default_warmup(total_epochs: usize) -> usize {
        total_epochs.div_ceil(10).max(1).min(total_epochs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_epochs == 0 {
            return bad("train.total_epochs must be at least 1".into());
        }
        if self.warmup_epochs > self.total_epochs {
            return bad(format!("train.warmup_epochs ({}) exceeds train.total_epochs ({})", self.warmup_epochs, self.total_epochs));
        }
        if self.batch_size_labeled == 0 || self.batch_size_unlabeled == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.lr_base >= 0.0 && self.lr_base.is_finite()) {
            return bad(format!("train.lr_base must be finite and >= 0, got {}", self.lr_base));
        }
        for (name, v) in [("train.teacher_momentum", self.teacher_momentum), ("proto.alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [("loss.tau_indicator", self.tau_indicator), ("loss.tau_contrastive", self.tau_contrastive)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return bad(format!("loss.lambda_c must be >= 0, got {}", self.lambda_c));
        }
        if self.eval_every == 0 {
            return bad("train.eval_every must be at least 1".into());
        }
        if self.model_width == 0 || self.rep_dim == 0 {
            return bad("model.width and model.rep_dim must be at least 1".into());
        }
        self.sampling.validate()
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig { in_channels: crate::data::CHANNELS, width: self.model_width, num_classes, rep_dim: self.rep_dim }
    }
}

/// Labels, valid pixels and reliability indicator for one space of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceSupervision {
    pub labels: LabelMap,
    pub valid: Mask,
    pub indicator: Tensor,
}

/// Supervision of the logit and representation spaces for one unlabeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Wiring {
    pub logit: SpaceSupervision,
    pub rep: SpaceSupervision,
}

fn space(bundle: &PseudoLabelBundle, labels: &LabelMap, valid: &Mask, similarity: bool) -> Result<SpaceSupervision> {
    let table = if similarity { &bundle.indicators } else { &bundle.probs };
    Ok(SpaceSupervision { labels: labels.clone(), valid: valid.clone(), indicator: lookup(table, labels)? })
}

/// Routes a bundle's labels and indicators to the two spaces. The indicator
/// of a space always scores the labels that space is trained on. Returns
/// `None` for supervised-only training.
pub fn strategy_dispatch(strategy: Strategy, mode: IndicatorMode, bundle: &PseudoLabelBundle) -> Result<Option<Wiring>> {
    let (h, w) = (bundle.y_lgt.height(), bundle.y_lgt.width());
    let all = Mask::filled(h, w, true);
    let (logit_labels, logit_valid, rep_labels, rep_valid) = match strategy {
        Strategy::SupervisedOnly => return Ok(None),
        Strategy::LgtOnly => (&bundle.y_lgt, &all, &bundle.y_lgt, &all),
        Strategy::RepOnly => (&bundle.y_rep, &all, &bundle.y_rep, &all),
        Strategy::Mix => (&bundle.mix.labels, &bundle.mix.valid, &bundle.mix.labels, &bundle.mix.valid),
        Strategy::Cross => (
            &bundle.cross.for_logit.labels,
            &bundle.cross.for_logit.valid,
            &bundle.cross.for_rep.labels,
            &bundle.cross.for_rep.valid,
        ),
    };
    Ok(Some(Wiring {
        logit: space(bundle, logit_labels, logit_valid, mode.logit_uses_similarity())?,
        rep: space(bundle, rep_labels, rep_valid, mode.rep_uses_similarity())?,
    }))
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
    /// Mean over the epoch's steps.
    pub loss: LossReport,
    pub teacher_miou: Option<f64>,
    pub student_miou: Option<f64>,
    /// Pseudo-label mIoU of the logit, representation and mix sources.
    pub pseudo_miou: Option<[f64; 3]>,
    pub initialized_classes: usize,
}

impl MetricsRecord {
    pub fn csv_header() -> String {
        format!(
            "epoch,lr,{},teacher_miou,student_miou,pseudo_lgt_miou,pseudo_rep_miou,pseudo_mix_miou,initialized_classes",
            LossReport::CSV_COLUMNS
        )
    }

    pub fn csv(&self) -> String {
        // scores keep full precision so summaries can be recomputed exactly
        let opt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
        let p = |i: usize| opt(self.pseudo_miou.map(|p| p[i]));
        format!(
            "{},{:.9},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss.csv(),
            opt(self.teacher_miou),
            opt(self.student_miou),
            p(0),
            p(1),
            p(2),
            self.initialized_classes
        )
    }
}

/// Model, teacher and bank after some number of completed epochs.
#[derive(Clone, Debug)]
pub struct RunState {
    pub student: ModelParams,
    pub teacher: TeacherState,
    pub bank: PrototypeBank,
    /// Completed epochs.
    pub epoch: usize,
    /// Records of the epochs run by this process.
    pub history: Vec<MetricsRecord>,
    /// Final pseudo-label quality, when tracked.
    pub pseudo_quality: Option<PseudoLabelQuality>,
}

impl RunState {
    pub fn new(cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        let student = ModelParams::init(cfg.model_config(num_classes), cfg.seed)?;
        let teacher = TeacherState::from_student(&student, cfg.teacher_momentum)?;
        let bank = PrototypeBank::new(num_classes, cfg.rep_dim, cfg.alpha)?;
        Ok(RunState { student, teacher, bank, epoch: 0, history: Vec::new(), pseudo_quality: None })
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, t) in self.student.named() {
            out.push((format!("student.{name}"), t.clone()));
        }
        for (name, t) in self.teacher.params.named() {
            out.push((format!("teacher.{name}"), t.clone()));
        }
        out.extend(self.bank.to_tensors());
        out.push(("run.epoch".into(), Tensor::scalar(self.epoch as f64)));
        out
    }

    /// Restores a checkpoint written by [`RunState::to_tensors`]; shapes must
    /// match `cfg` and `num_classes`.
    pub fn load(path: &Path, cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        let mut tensors = io::read_checkpoint(path)?;
        let model_cfg = cfg.model_config(num_classes);
        let mut params = |prefix: &str| -> Result<ModelParams> {
            let ts = PARAM_NAMES
                .iter()
                .map(|n| io::take_tensor(&mut tensors, &format!("{prefix}.{n}"), path))
                .collect::<Result<Vec<_>>>()?;
            ModelParams::from_tensors(model_cfg, ts).map_err(|e| Error::format(path, e.to_string()))
        };
        let student = params("student")?;
        let teacher_params = params("teacher")?;
        let mut take = |n: &str| io::take_tensor(&mut tensors, n, path);
        let (protos, pre, init, state) = (take("bank.prototypes")?, take("bank.pre_norm")?, take("bank.initialized")?, take("bank.state")?);
        let epoch = take("run.epoch")?.item()? as usize;
        let bank = PrototypeBank::from_tensors(&protos, &pre, &init, &state).map_err(|e| Error::format(path, e.to_string()))?;
        if bank.num_classes() != num_classes || bank.dim() != cfg.rep_dim {
            return Err(Error::format(path, "prototype bank does not match the configuration"));
        }
        if epoch > cfg.total_epochs {
            return Err(Error::format(path, format!("checkpoint epoch {epoch} beyond total_epochs {}", cfg.total_epochs)));
        }
        Ok(RunState {
            student,
            teacher: TeacherState { params: teacher_params, momentum: cfg.teacher_momentum },
            bank,
            epoch,
            history: Vec::new(),
            pseudo_quality: None,
        })
    }
}

const EVAL_CHUNK: usize = 8;

/// Teacher or student outputs for many images, in bounded-memory chunks.
pub fn predict(params: &ModelParams, images: &[&Tensor]) -> Result<Vec<ForwardOutput>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        out.extend(forward_many(params, chunk)?);
    }
    Ok(out)
}

/// mIoU of `params` on labeled samples.
pub fn evaluate(params: &ModelParams, samples: &[SegSample], num_classes: usize) -> Result<IouScore> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for chunk in samples.chunks(EVAL_CHUNK) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        for (out, s) in forward_many(params, &images)?.iter().zip(chunk) {
            cm.add_maps(&logit_pseudo_labels(&out.logits)?.labels, &s.label, None)?;
        }
    }
    Ok(cm.score())
}

/// Teacher pseudo-labels on the unlabeled set scored against held ground
/// truth. Logit labels are scored where confidence reaches `delta_u`,
/// representation labels where the indicator reaches `delta_w`, and mix
/// labels on agreeing pixels that also pass the confidence threshold.
pub fn pseudo_label_quality(
    teacher: &ModelParams,
    bank: &PrototypeBank,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    num_classes: usize,
    mut diagnostics: Option<&mut IndicatorDiagnostics>,
) -> Result<PseudoLabelQuality> {
    let mut q = PseudoLabelQuality::new(num_classes);
    let s = &cfg.sampling;
    for start in (0..split.unlabeled_len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(split.unlabeled_len())).collect();
        let views: Vec<&Tensor> = idx.iter().map(|&i| split.unlabeled(i).image).collect();
        for (out, &i) in forward_many(teacher, &views)?.iter().zip(&idx) {
            let b = PseudoLabelBundle::compute(&out.logits, &out.reps, bank, cfg.tau_indicator, s.delta_u, s.delta_w)?;
            let (h, w) = (b.y_lgt.height(), b.y_lgt.width());
            let all = vec![true; h * w];
            let lgt_mask = Mask::new(h, w, valid_logit_pixels(b.conf.data(), s.delta_u, &all))?;
            let rep_mask = Mask::new(h, w, b.sim_ind.data().iter().map(|v| *v >= s.delta_w).collect())?;
            let mix_mask = Mask::new(h, w, valid_logit_pixels(b.conf.data(), s.delta_u, b.mix.valid.data()))?;
            let truth = split.unlabeled_ground_truth(i);
            q.add(&b.y_lgt, &lgt_mask, &b.y_rep, &rep_mask, &b.mix.labels, &mix_mask, truth)?;
            if let Some(d) = diagnostics.as_deref_mut() {
                d.add(&b.conf, &b.cosine, truth)?;
            }
        }
    }
    Ok(q)
}

/// Files of a run directory.
struct RunWriter {
    dir: PathBuf,
    metrics: Vec<String>,
    sampling: Vec<String>,
}

impl RunWriter {
    fn create(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::create_dir_all(dir.join("dumps"))?;
        fs::write(dir.join("config.txt"), crate::config::train_config_text(cfg))?;
        Ok(RunWriter { dir: dir.to_path_buf(), metrics: Vec::new(), sampling: Vec::new() })
    }

    /// Keeps the rows of epochs up to `epoch` from an earlier run.
    fn keep_until(&mut self, epoch: usize) -> Result<()> {
        let rows = |name: &str| -> Result<Vec<String>> {
            let path = self.dir.join(name);
            let text = fs::read_to_string(&path).map_err(|e| Error::format(&path, e.to_string()))?;
            Ok(text
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= epoch))
                .map(str::to_string)
                .collect())
        };
        self.metrics = rows("metrics.csv")?;
        self.sampling = rows("sampling.csv")?;
        Ok(())
    }

    fn flush(&self) -> Result<()> {
        let write = |name: &str, header: &str, rows: &[String]| -> Result<()> {
            let mut text = format!("{header}\n");
            for r in rows {
                text.push_str(r);
                text.push('\n');
            }
            fs::write(self.dir.join(name), text)?;
            Ok(())
        };
        write("metrics.csv", &MetricsRecord::csv_header(), &self.metrics)?;
        write("sampling.csv", SamplingStats::CSV_HEADER, &self.sampling)
    }
}

struct StepBatch {
    labeled: Vec<SegSample>,
    unlabeled: Vec<Tensor>,
}

/// Per-epoch order of sample indices: back-to-back shuffles, cut to `len`.
fn epoch_order(n: usize, len: usize, rng: &mut Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len && n > 0 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        out.extend(perm);
    }
    out.truncate(len);
    out
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    split: &'a DatasetSplit,
    num_classes: usize,
    pub state: RunState,
    writer: Option<RunWriter>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, split: &'a DatasetSplit, num_classes: usize, out: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        if split.labeled.is_empty() {
            return Err(Error::Contract("training needs at least one labeled sample".into()));
        }
        if let Some(bad) = split.labeled.iter().chain(&split.validation).find(|s| s.label.data().iter().any(|&l| l as usize >= num_classes)) {
            return Err(Error::Config(format!("sample {} has labels beyond {num_classes} classes", bad.id)));
        }
        let writer = out.map(|d| RunWriter::create(d, cfg)).transpose()?;
        Ok(Trainer { cfg: cfg.clone(), split, num_classes, state: RunState::new(cfg, num_classes)?, writer })
    }

    /// Continues from `checkpoint`, keeping earlier rows of the run's CSVs.
    pub fn resume(cfg: &TrainConfig, split: &'a DatasetSplit, num_classes: usize, out: &Path, checkpoint: &Path) -> Result<Self> {
        let mut t = Trainer::new(cfg, split, num_classes, None)?;
        t.state = RunState::load(checkpoint, cfg, num_classes)?;
        let mut writer = RunWriter::create(out, cfg)?;
        writer.keep_until(t.state.epoch)?;
        t.writer = Some(writer);
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        let l = self.split.labeled.len().div_ceil(self.cfg.batch_size_labeled);
        let u = self.split.unlabeled_len().div_ceil(self.cfg.batch_size_unlabeled);
        l.max(u).max(1)
    }

    pub fn run(mut self) -> Result<RunState> {
        while self.state.epoch < self.cfg.total_epochs {
            self.run_epoch()?;
        }
        self.finish()?;
        Ok(self.state)
    }

    fn run_epoch(&mut self) -> Result<()> {
        let epoch = self.state.epoch;
        let steps = self.steps_per_epoch();
        let mut rng = rng_for(self.cfg.seed, "epoch", epoch as u64);
        let warmup = epoch < self.cfg.warmup_epochs;
        let (bl, bu) = (self.cfg.batch_size_labeled, self.cfg.batch_size_unlabeled);
        let labeled_order = epoch_order(self.split.labeled.len(), steps * bl, &mut rng);
        let unlabeled_order =
            if warmup || self.cfg.strategy == Strategy::SupervisedOnly { Vec::new() } else { epoch_order(self.split.unlabeled_len(), steps * bu, &mut rng) };

        let mut sum = LossReport::default();
        let mut stats = SamplingStats::new(self.num_classes);
        let mut lr = 0.0;
        for step in 0..steps {
            let labeled = labeled_order[step * bl..(step + 1) * bl]
                .iter()
                .map(|&i| augment_with(&self.split.labeled[i], AugmentParams::draw(&mut rng)))
                .collect();
            let unlabeled = unlabeled_order
                .get(step * bu..(step + 1) * bu)
                .unwrap_or(&[])
                .iter()
                .map(|&i| crate::data::augment_image(self.split.unlabeled(i).image, AugmentParams::draw(&mut rng)))
                .collect();
            let progress = epoch as f64 + step as f64 / steps as f64;
            lr = poly_lr(self.cfg.lr_base, progress, self.cfg.total_epochs as f64)?;
            let report = self.step(StepBatch { labeled, unlabeled }, lr, &mut rng, &mut stats)?;
            if !report.total.is_finite() {
                log::error!("non-finite loss at epoch {epoch}, step {step}: {report:?}");
                return Err(Error::NonFinite { epoch, step });
            }
            sum.accumulate(&report);
        }
        self.state.epoch += 1;
        let done = self.state.epoch;
        let mut record = MetricsRecord {
            epoch: done,
            lr,
            loss: sum.scaled(1.0 / steps as f64),
            teacher_miou: None,
            student_miou: None,
            pseudo_miou: None,
            initialized_classes: self.state.bank.initialized_classes().len(),
        };
        let evaluate_now = done.is_multiple_of(self.cfg.eval_every) || done == self.cfg.total_epochs;
        if evaluate_now {
            self.evaluate_into(&mut record)?;
        }
        log::info!(
            "epoch {done}/{} loss {:.4} (s {:.4} u {:.4} c {:.4}) teacher mIoU {}",
            self.cfg.total_epochs,
            record.loss.total,
            record.loss.supervised,
            record.loss.unsupervised,
            record.loss.contrastive,
            record.teacher_miou.map_or("-".into(), |m| format!("{:.4}", m))
        );
        if let Some(w) = &mut self.writer {
            w.metrics.push(record.csv());
            w.sampling.extend(stats.csv_rows(done));
            w.flush()?;
            if evaluate_now {
                io::write_checkpoint(&w.dir.join(format!("checkpoints/epoch_{done}.bin")), &self.state.to_tensors())?;
            }
        }
        self.state.history.push(record);
        Ok(())
    }

    fn evaluate_into(&mut self, record: &mut MetricsRecord) -> Result<()> {
        if !self.split.validation.is_empty() {
            record.teacher_miou = Some(evaluate(&self.state.teacher.params, &self.split.validation, self.num_classes)?.miou);
            record.student_miou = Some(evaluate(&self.state.student, &self.split.validation, self.num_classes)?.miou);
        }
        if self.cfg.track_pseudo_quality && !self.state.bank.initialized_classes().is_empty() && self.split.unlabeled_len() > 0 {
            let q = pseudo_label_quality(&self.state.teacher.params, &self.state.bank, self.split, &self.cfg, self.num_classes, None)?;
            record.pseudo_miou = Some([q.logit.score().miou, q.representation.score().miou, q.mix.score().miou]);
            self.state.pseudo_quality = Some(q);
        }
        Ok(())
    }

    fn step(&mut self, batch: StepBatch, lr: f64, rng: &mut Rng, stats: &mut SamplingStats) -> Result<LossReport> {
        let c = self.num_classes;
        let (nl, nu) = (batch.labeled.len(), batch.unlabeled.len());
        let (h, w) = (batch.labeled[0].height(), batch.labeled[0].width());
        let hw = h * w;
        let images: Vec<&Tensor> = batch.labeled.iter().map(|s| &s.image).chain(&batch.unlabeled).collect();

        // teacher pass, no gradients
        let teacher_out = forward_many(&self.state.teacher.params, &images)?;
        let mut sums = CentroidSums::new(self.cfg.rep_dim);
        for (out, s) in teacher_out.iter().zip(&batch.labeled) {
            sums.add(&out.reps, s.label.data(), &vec![true; hw])?;
        }

        let unsupervised = nu > 0 && !self.state.bank.initialized_classes().is_empty();
        if nu > 0 && !unsupervised {
            return Err(Error::Contract("pseudo-labels requested before any prototype was initialized".into()));
        }

        // flat per-pixel supervision over the whole batch (labeled first)
        let n = (nl + nu) * hw;
        let mut logit_labels = vec![0u8; n];
        let mut logit_mask = vec![false; n];
        let mut rep_labels = vec![0u8; n];
        let mut rep_valid = vec![false; n];
        let mut rep_ind = vec![0.0; n];
        if unsupervised {
            let s = &self.cfg.sampling;
            for (b, (out, sample)) in teacher_out.iter().zip(&batch.labeled).enumerate() {
                let table = if self.cfg.indicator.rep_uses_similarity() {
                    indicator_table(&out.reps, &self.state.bank, self.cfg.tau_indicator)?
                } else {
                    class_probabilities(&out.logits)?
                };
                let ind = lookup(&table, &sample.label)?;
                let r = b * hw..(b + 1) * hw;
                rep_labels[r.clone()].copy_from_slice(sample.label.data());
                rep_valid[r.clone()].fill(true);
                rep_ind[r].copy_from_slice(ind.data());
            }
            for (k, out) in teacher_out[nl..].iter().enumerate() {
                let bundle = PseudoLabelBundle::compute(&out.logits, &out.reps, &self.state.bank, self.cfg.tau_indicator, s.delta_u, s.delta_w)?;
                let wiring = strategy_dispatch(self.cfg.strategy, self.cfg.indicator, &bundle)?
                    .ok_or_else(|| Error::Contract("unlabeled batch under supervised-only training".into()))?;
                let r = (nl + k) * hw..(nl + k + 1) * hw;
                logit_labels[r.clone()].copy_from_slice(wiring.logit.labels.data());
                logit_mask[r.clone()]
                    .copy_from_slice(&valid_logit_pixels(wiring.logit.indicator.data(), s.delta_u, wiring.logit.valid.data()));
                rep_labels[r.clone()].copy_from_slice(wiring.rep.labels.data());
                rep_valid[r.clone()].copy_from_slice(wiring.rep.valid.data());
                rep_ind[r].copy_from_slice(wiring.rep.indicator.data());

                // prototypes learn from reliable unlabeled pixels only
                let reliable = lookup(&bundle.indicators, &wiring.rep.labels)?;
                let gate: Vec<bool> =
                    wiring.rep.valid.data().iter().zip(reliable.data()).map(|(v, j)| *v && *j >= s.delta_w).collect();
                sums.add(&out.reps, wiring.rep.labels.data(), &gate)?;
            }
        }

        // student pass
        let mut tape = Tape::new();
        let nodes = forward_batch(&mut tape, &self.state.student, &images, true)?;
        let labeled_rows = tape.gather_rows(nodes.logits, (0..nl * hw).collect())?;
        let gt: Vec<u8> = batch.labeled.iter().flat_map(|s| s.label.data().iter().copied()).collect();
        let ls = supervised_loss(&mut tape, labeled_rows, &gt)?;
        let (lu, lc, anchor_count) = if unsupervised {
            let lu = unsupervised_loss(&mut tape, nodes.logits, &logit_labels, &logit_mask)?;
            let mut selected = select_anchors(&rep_ind, &rep_labels, &rep_valid, c, &self.cfg.sampling, rng)?;
            for (class, list) in selected.per_class.iter_mut().enumerate() {
                if !self.state.bank.is_initialized(class) {
                    list.clear();
                    selected.hard[class] = 0;
                }
            }
            stats.record_anchors(&selected, &rep_ind);
            let mut pools = vec![Vec::new(); c];
            for i in (0..n).filter(|&i| rep_valid[i]) {
                pools[rep_labels[i] as usize].push(i);
            }
            let mut anchors = Vec::with_capacity(selected.total());
            for (class, list) in selected.per_class.iter().enumerate() {
                for &row in list {
                    let negatives = sample_negatives(&self.state.bank, class, &pools, &self.cfg.sampling, rng)?;
                    stats.record_negatives(&rep_labels, &negatives);
                    anchors.push(Anchor { row, class, negatives });
                }
            }
            let lc = contrastive_loss(&mut tape, nodes.reps, &anchors, &self.state.bank, self.cfg.tau_contrastive)?;
            (lu, lc, anchors.len())
        } else {
            let zero = tape.constant(Tensor::scalar(0.0));
            (zero, zero, 0)
        };
        let total = total_loss(&mut tape, ls, lu, lc, self.cfg.lambda_c)?;
        let report = LossReport {
            supervised: tape.value(ls).item()?,
            unsupervised: tape.value(lu).item()?,
            contrastive: tape.value(lc).item()?,
            total: tape.value(total).item()?,
            labeled_pixels: nl * hw,
            unlabeled_pixels: logit_mask.iter().filter(|&&m| m).count(),
            anchors: anchor_count,
        };
        if !report.total.is_finite() {
            return Ok(report);
        }

        let grads = tape.backward(total)?;
        sgd_step(self.state.student.tensors_mut(), &nodes.params, &grads, lr)?;
        self.state.teacher.ema_update(&self.state.student)?;
        self.state.bank.ema_update(&sums.finish())?;
        Ok(report)
    }

    /// Final artifacts: per-class scores, diagnostics and image dumps.
    fn finish(&mut self) -> Result<()> {
        let Some(w) = &self.writer else { return Ok(()) };
        let dir = w.dir.clone();
        let c = self.num_classes;
        let mut csv = String::from("source,class_id,iou\n");
        if !self.split.validation.is_empty() {
            for (name, params) in [("teacher_val", &self.state.teacher.params), ("student_val", &self.state.student)] {
                let score = evaluate(params, &self.split.validation, c)?;
                for (k, iou) in score.per_class.iter().enumerate() {
                    let _ = writeln!(csv, "{name},{k},{}", iou.map(|v| format!("{v:.6}")).unwrap_or_default());
                }
                let _ = writeln!(csv, "{name},miou,{:.6}", score.miou);
            }
        }
        if let Some(q) = &self.state.pseudo_quality {
            csv.push_str(q.csv().lines().skip(1).map(|l| format!("pseudo_{l}\n")).collect::<String>().as_str());
        }
        fs::write(dir.join("per_class_iou.csv"), csv)?;
        self.dump(&dir.join("dumps"))
    }

    fn dump(&self, dir: &Path) -> Result<()> {
        let count = self.cfg.dump_images.min(self.split.unlabeled_len());
        let images: Vec<&Tensor> = (0..count).map(|i| self.split.unlabeled(i).image).collect();
        if images.is_empty() {
            return Ok(());
        }
        let c = self.num_classes;
        let s = &self.cfg.sampling;
        for (k, out) in predict(&self.state.teacher.params, &images)?.iter().enumerate() {
            let id = self.split.unlabeled(k).id;
            let y_lgt = logit_pseudo_labels(&out.logits)?.labels;
            let (h, w) = (y_lgt.height(), y_lgt.width());
            io::write_ppm(&dir.join(format!("{id:05}_overlay.ppm")), w, h, &io::overlay(images[k], &y_lgt, c)?)?;
            io::write_pgm(&dir.join(format!("{id:05}_lgt.pgm")), w, h, &io::label_gray(&y_lgt, c))?;
            if self.state.bank.initialized_classes().is_empty() {
                continue;
            }
            let b = PseudoLabelBundle::compute(&out.logits, &out.reps, &self.state.bank, self.cfg.tau_indicator, s.delta_u, s.delta_w)?;
            io::write_pgm(&dir.join(format!("{id:05}_rep.pgm")), w, h, &io::label_gray(&b.y_rep, c))?;
            io::write_pgm(&dir.join(format!("{id:05}_mix.pgm")), w, h, &io::label_gray(&b.mix.labels, c))?;
            io::write_pgm(&dir.join(format!("{id:05}_mix_valid.pgm")), w, h, &io::mask_gray(&b.mix.valid))?;
            io::write_pgm(&dir.join(format!("{id:05}_cross_logit_valid.pgm")), w, h, &io::mask_gray(&b.cross.for_logit.valid))?;
            io::write_pgm(&dir.join(format!("{id:05}_cross_rep_valid.pgm")), w, h, &io::mask_gray(&b.cross.for_rep.valid))?;
        }
        Ok(())
    }
}

/// Trains from scratch, writing the run directory when `out` is given.
pub fn train(cfg: &TrainConfig, split: &DatasetSplit, num_classes: usize, out: Option<&Path>) -> Result<RunState> {
    Trainer::new(cfg, split, num_classes, out)?.run()
}

/// One cell of an ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridEntry {
    pub strategy: Strategy,
    pub indicator: IndicatorMode,
    pub seed: u64,
}

impl GridEntry {
    pub fn run_name(&self) -> String {
        format!("{}_{}_s{}", self.strategy.as_str(), self.indicator.as_str(), self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub entry: GridEntry,
    /// Teacher validation mIoU after the last epoch.
    pub final_miou: Option<f64>,
    pub pseudo_miou: Option<[f64; 3]>,
    /// 0 on success, otherwise the failing error's exit code.
    pub exit_code: i32,
}

/// Runs every grid entry on the shared split with up to `jobs` concurrent
/// runs, then writes `summary.csv` and `aggregate.csv` under `out`.
pub fn ablate(base: &TrainConfig, split: &DatasetSplit, num_classes: usize, grid: &[GridEntry], out: &Path, jobs: usize) -> Result<Vec<RunOutcome>> {
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = grid.iter().find(|e| !seen.insert(**e)) {
        return Err(Error::Config(format!("duplicate grid entry {}", dup.run_name())));
    }
    fs::create_dir_all(out.join("runs"))?;
    let queue = Mutex::new(grid.iter().enumerate());
    let results = Mutex::new(vec![None; grid.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, grid.len().max(1)) {
            scope.spawn(|| loop {
                let Some((i, entry)) = queue.lock().expect("queue lock").next() else { break };
                let cfg = TrainConfig { seed: entry.seed, strategy: entry.strategy, indicator: entry.indicator, ..base.clone() };
                let dir = out.join("runs").join(entry.run_name());
                let outcome = match train(&cfg, split, num_classes, Some(&dir)) {
                    Ok(state) => {
                        let last = state.history.last();
                        RunOutcome {
                            entry: *entry,
                            final_miou: last.and_then(|r| r.teacher_miou),
                            pseudo_miou: last.and_then(|r| r.pseudo_miou),
                            exit_code: 0,
                        }
                    }
                    Err(e) => {
                        log::error!("run {} failed: {e}", entry.run_name());
                        RunOutcome { entry: *entry, final_miou: None, pseudo_miou: None, exit_code: e.exit_code() }
                    }
                };
                results.lock().expect("results lock")[i] = Some(outcome);
            });
        }
    });
    let outcomes: Vec<RunOutcome> = results.into_inner().expect("results lock").into_iter().map(|o| o.expect("every entry ran")).collect();
    fs::write(out.join("summary.csv"), summary_csv(&outcomes))?;
    fs::write(out.join("aggregate.csv"), aggregate_csv(&outcomes))?;
    Ok(outcomes)
}

/// Per-run rows; `delta_vs_baseline` is the difference to the
/// `(lgt_only, conf)` run of the same seed.
pub fn summary_csv(outcomes: &[RunOutcome]) -> String {
    let baseline = |seed: u64| {
        outcomes
            .iter()
            .find(|o| o.entry.strategy == Strategy::LgtOnly && o.entry.indicator == IndicatorMode::Conf && o.entry.seed == seed)
            .and_then(|o| o.final_miou)
    };
    let mut out = String::from("strategy,indicator,seed,final_miou,delta_vs_baseline,exit_code\n");
    for o in outcomes {
        let delta = o.final_miou.zip(baseline(o.entry.seed)).map(|(m, b)| format!("{}", m - b)).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{delta},{}",
            o.entry.strategy.as_str(),
            o.entry.indicator.as_str(),
            o.entry.seed,
            o.final_miou.map(|m| format!("{m}")).unwrap_or_default(),
            o.exit_code
        );
    }
    out
}

/// Mean and sample standard deviation of final mIoU per configuration.
pub fn aggregate(outcomes: &[RunOutcome]) -> Vec<(Strategy, IndicatorMode, Vec<f64>, f64, f64)> {
    let mut groups: std::collections::BTreeMap<(Strategy, IndicatorMode), Vec<f64>> = Default::default();
    for o in outcomes {
        if let Some(m) = o.final_miou {
            groups.entry((o.entry.strategy, o.entry.indicator)).or_default().push(m);
        }
    }
    groups
        .into_iter()
        .map(|((s, i), v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64 } else { 0.0 };
            (s, i, v, mean, var.sqrt())
        })
        .collect()
}

pub fn aggregate_csv(outcomes: &[RunOutcome]) -> String {
    let mut out = String::from("strategy,indicator,runs,mean_miou,std_miou\n");
    for (s, i, v, mean, std) in aggregate(outcomes) {
        let _ = writeln!(out, "{},{},{},{mean},{std}", s.as_str(), i.as_str(), v.len());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, generate_ids, split, DataConfig};

    fn tiny_split(seed: u64) -> DatasetSplit {
        let cfg = DataConfig { seed, count: 10, height: 16, width: 16, num_classes: 3, shapes_per_image: 2, noise_std: 0.02 };
        let mut s = split(generate(&cfg).unwrap(), 3, seed).unwrap();
        s.validation = generate_ids(&cfg, 10..13).unwrap();
        s
    }

    fn tiny_cfg(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            total_epochs: 3,
            warmup_epochs: 1,
            batch_size_labeled: 2,
            batch_size_unlabeled: 2,
            model_width: 4,
            rep_dim: 4,
            strategy,
            sampling: SamplingConfig { anchors_per_class: 8, negatives_per_anchor: 4, delta_w: 0.3, delta_s: 0.1, delta_u: 0.3, ..Default::default() },
            eval_every: 1,
            ..Default::default()
        }
    }

    #[test]
    fn supervised_only_has_no_unlabeled_losses() {
        let s = tiny_split(1);
        let state = train(&tiny_cfg(Strategy::SupervisedOnly), &s, 3, None).unwrap();
        assert!(state.history.iter().all(|r| r.loss.unsupervised == 0.0 && r.loss.contrastive == 0.0));
    }

    #[test]
    fn every_strategy_trains_with_finite_losses() {
        let s = tiny_split(2);
        for strategy in Strategy::ALL {
            for mode in IndicatorMode::ALL {
                let cfg = TrainConfig { indicator: mode, ..tiny_cfg(strategy) };
                let state = train(&cfg, &s, 3, None).unwrap();
                assert_eq!(state.epoch, 3);
                assert!(state.history.iter().all(|r| r.loss.total.is_finite()), "{strategy:?}/{mode:?}");
            }
        }
    }

    #[test]
    fn dispatch_wiring() {
        let mut bank = PrototypeBank::new(3, 2, 0.9).unwrap();
        bank.set_prototype(0, &[1.0, 0.0]).unwrap();
        bank.set_prototype(1, &[0.0, 1.0]).unwrap();
        // pixel 0: logits say 2, reps say 0; pixel 1: both say 1
        let logits = Tensor::new([3, 1, 2], vec![0.0, 0.0, 0.0, 3.0, 2.0, 0.0]).unwrap();
        let reps = Tensor::new([2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = PseudoLabelBundle::compute(&logits, &reps, &bank, 0.5, 0.0, 0.0).unwrap();
        assert!(strategy_dispatch(Strategy::SupervisedOnly, IndicatorMode::Conf, &b).unwrap().is_none());

        let lgt = strategy_dispatch(Strategy::LgtOnly, IndicatorMode::Conf, &b).unwrap().unwrap();
        assert_eq!(lgt.logit.labels.data(), &[2, 1]);
        assert_eq!(lgt.rep.labels.data(), &[2, 1]);
        assert_eq!(lgt.rep.indicator, b.conf);

        let rep = strategy_dispatch(Strategy::RepOnly, IndicatorMode::Smlr, &b).unwrap().unwrap();
        assert_eq!(rep.logit.labels.data(), &[0, 1]);
        assert_eq!(rep.logit.indicator, b.sim_ind);

        let mix = strategy_dispatch(Strategy::Mix, IndicatorMode::Mix, &b).unwrap().unwrap();
        assert_eq!(mix.logit.valid.data(), &[false, true]);
        assert_eq!(mix.rep.valid.data(), &[false, true]);
        assert_eq!(mix.logit.indicator.data()[1], b.conf.data()[1]);
        assert_eq!(mix.rep.indicator.data()[1], b.sim_ind.data()[1]);

        let cross = strategy_dispatch(Strategy::Cross, IndicatorMode::Mix, &b).unwrap().unwrap();
        assert_eq!(cross.logit.labels, b.y_rep);
        assert_eq!(cross.rep.labels, b.y_lgt);
    }

    #[test]
    fn summary_deltas_and_aggregate() {
        let o = |s, i, seed, m| RunOutcome { entry: GridEntry { strategy: s, indicator: i, seed }, final_miou: Some(m), pseudo_miou: None, exit_code: 0 };
        let runs = vec![
            o(Strategy::LgtOnly, IndicatorMode::Conf, 1, 0.5),
            o(Strategy::Mix, IndicatorMode::Mix, 1, 0.55),
            o(Strategy::Mix, IndicatorMode::Mix, 2, 0.65),
        ];
        let csv = summary_csv(&runs);
        let delta: f64 = csv.lines().nth(2).unwrap().split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(delta, 0.55 - 0.5);
        assert!(csv.lines().nth(3).unwrap().ends_with(",,0"));
        let agg = aggregate(&runs);
        let mix = agg.iter().find(|a| a.0 == Strategy::Mix).unwrap();
        assert!((mix.3 - 0.6).abs() < 1e-12);
    }
}
