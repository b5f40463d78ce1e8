//! Flat text configuration: `key = value` lines, `#` comments, dotted keys.
//!
//! ```text
//! seed = 3
//! data.num_classes = 5
//! train.strategy = mix        # supervised_only | lgt_only | rep_only | mix | cross
//! sampling.delta_s = 0.25
//! ```
//!
//! Unknown keys are errors. [`RunConfig::to_text`] writes every key with its
//! resolved value.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    /// Required for generation; taken from the dataset manifest otherwise.
    pub num_classes: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub labeled_count: usize,
    pub unlabeled_count: usize,
    pub validation_count: usize,
    pub shapes_per_image: usize,
    pub noise_std: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        let d = DataConfig::default();
        DataSettings {
            num_classes: None,
            height: d.height,
            width: d.width,
            labeled_count: 8,
            unlabeled_count: 200,
            validation_count: 32,
            shapes_per_image: d.shapes_per_image,
            noise_std: d.noise_std,
        }
    }
}

impl DataSettings {
    /// Generation config for the training pool (labeled and unlabeled ids);
    /// validation ids follow it.
    pub fn data_config(&self, seed: u64) -> Result<DataConfig> {
        let num_classes = self.num_classes.ok_or_else(|| Error::Config("missing required key `data.num_classes`".into()))?;
        let cfg = DataConfig {
            seed,
            count: self.labeled_count + self.unlabeled_count,
            height: self.height,
            width: self.width,
            num_classes,
            shapes_per_image: self.shapes_per_image,
            noise_std: self.noise_std,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSettings,
    pub train: TrainConfig,
}


struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let Some((line, raw)) = self.map.remove(key) else { return Ok(None) };
        raw.parse()
            .map(Some)
            .map_err(|e| Error::Parse { line, message: format!("bad value `{raw}` for `{key}`: {e}") })
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn line_of(&self, key: &str) -> Option<usize> {
        self.map.get(key).map(|e| e.0)
    }
}

fn parse_entries(text: &str) -> Result<Entries> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Parse { line, message: format!("expected `key = value`, got `{content}`") });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            return Err(Error::Parse { line, message: format!("invalid key `{key}`") });
        }
        if value.is_empty() {
            return Err(Error::Parse { line, message: format!("missing value for `{key}`") });
        }
        if let Some((first, _)) = map.insert(key.to_string(), (line, value.to_string())) {
            return Err(Error::Parse { line, message: format!("`{key}` already set on line {first}") });
        }
    }
    Ok(Entries { map })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut e = parse_entries(text)?;
        let mut cfg = RunConfig::default();
        e.set("seed", &mut cfg.seed)?;

        let d = &mut cfg.data;
        d.num_classes = e.take("data.num_classes")?;
        e.set("data.height", &mut d.height)?;
        e.set("data.width", &mut d.width)?;
        e.set("data.labeled_count", &mut d.labeled_count)?;
        e.set("data.unlabeled_count", &mut d.unlabeled_count)?;
        e.set("data.validation_count", &mut d.validation_count)?;
        e.set("data.shapes_per_image", &mut d.shapes_per_image)?;
        e.set("data.noise_std", &mut d.noise_std)?;

        let t = &mut cfg.train;
        t.seed = cfg.seed;
        e.set("train.total_epochs", &mut t.total_epochs)?;
        t.warmup_epochs = TrainConfig::default_warmup(t.total_epochs);
        e.set("train.warmup_epochs", &mut t.warmup_epochs)?;
        e.set("train.batch_size_labeled", &mut t.batch_size_labeled)?;
        e.set("train.batch_size_unlabeled", &mut t.batch_size_unlabeled)?;
        e.set("train.lr_base", &mut t.lr_base)?;
        e.set("train.teacher_momentum", &mut t.teacher_momentum)?;
        let strategy_line = e.line_of("train.strategy");
        e.set("train.strategy", &mut t.strategy).map_err(|err| relabel(err, strategy_line))?;
        let indicator_line = e.line_of("train.indicator");
        e.set("train.indicator", &mut t.indicator).map_err(|err| relabel(err, indicator_line))?;
        e.set("train.eval_every", &mut t.eval_every)?;
        e.set("train.track_pseudo_quality", &mut t.track_pseudo_quality)?;
        e.set("train.dump_images", &mut t.dump_images)?;
        e.set("model.width", &mut t.model_width)?;
        e.set("model.rep_dim", &mut t.rep_dim)?;
        e.set("proto.alpha", &mut t.alpha)?;
        let mut tau = crate::losses::DEFAULT_TAU;
        e.set("loss.tau", &mut tau)?;
        t.tau_indicator = tau;
        t.tau_contrastive = tau;
        e.set("loss.tau_indicator", &mut t.tau_indicator)?;
        e.set("loss.tau_contrastive", &mut t.tau_contrastive)?;
        e.set("loss.lambda_c", &mut t.lambda_c)?;
        let s = &mut t.sampling;
        e.set("sampling.delta_u", &mut s.delta_u)?;
        e.set("sampling.delta_w", &mut s.delta_w)?;
        e.set("sampling.delta_s", &mut s.delta_s)?;
        e.set("sampling.hard", &mut s.hard_sampling)?;
        e.set("sampling.anchors_per_class", &mut s.anchors_per_class)?;
        e.set("sampling.negatives_per_anchor", &mut s.negatives_per_anchor)?;
        e.set("sampling.tau_neg", &mut s.tau_neg)?;

        if let Some((key, (line, _))) = e.map.into_iter().next() {
            return Err(Error::Parse { line, message: format!("unknown key `{key}`") });
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Replaces the shared seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let mut out = format!("seed = {}\n", self.seed);
        if let Some(c) = d.num_classes {
            out.push_str(&format!("data.num_classes = {c}\n"));
        }
        for (k, v) in [
            ("data.height", d.height.to_string()),
            ("data.width", d.width.to_string()),
            ("data.labeled_count", d.labeled_count.to_string()),
            ("data.unlabeled_count", d.unlabeled_count.to_string()),
            ("data.validation_count", d.validation_count.to_string()),
            ("data.shapes_per_image", d.shapes_per_image.to_string()),
            ("data.noise_std", fmt_f64(d.noise_std)),
        ] {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&train_config_text(&self.train));
        out
    }
}

fn relabel(err: Error, line: Option<usize>) -> Error {
    match (err, line) {
        (Error::Parse { message, .. }, Some(line)) => Error::Config(format!("line {line}: {message}")),
        (other, _) => other,
    }
}

/// `Display` of f64 is the shortest string that parses back to the same bits.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// The training keys of a config file (no `seed` line).
pub fn train_config_text(t: &TrainConfig) -> String {
    let s = &t.sampling;
    let mut out = String::new();
    for (k, v) in [
        ("train.total_epochs", t.total_epochs.to_string()),
        ("train.warmup_epochs", t.warmup_epochs.to_string()),
        ("train.batch_size_labeled", t.batch_size_labeled.to_string()),
        ("train.batch_size_unlabeled", t.batch_size_unlabeled.to_string()),
        ("train.lr_base", fmt_f64(t.lr_base)),
        ("train.teacher_momentum", fmt_f64(t.teacher_momentum)),
        ("train.strategy", t.strategy.as_str().to_string()),
        ("train.indicator", t.indicator.as_str().to_string()),
        ("train.eval_every", t.eval_every.to_string()),
        ("train.track_pseudo_quality", t.track_pseudo_quality.to_string()),
        ("train.dump_images", t.dump_images.to_string()),
        ("model.width", t.model_width.to_string()),
        ("model.rep_dim", t.rep_dim.to_string()),
        ("proto.alpha", fmt_f64(t.alpha)),
        ("loss.tau_indicator", fmt_f64(t.tau_indicator)),
        ("loss.tau_contrastive", fmt_f64(t.tau_contrastive)),
        ("loss.lambda_c", fmt_f64(t.lambda_c)),
        ("sampling.delta_u", fmt_f64(s.delta_u)),
        ("sampling.delta_w", fmt_f64(s.delta_w)),
        ("sampling.delta_s", fmt_f64(s.delta_s)),
        ("sampling.hard", s.hard_sampling.to_string()),
        ("sampling.anchors_per_class", s.anchors_per_class.to_string()),
        ("sampling.negatives_per_anchor", s.negatives_per_anchor.to_string()),
        ("sampling.tau_neg", fmt_f64(s.tau_neg)),
    ] {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}
