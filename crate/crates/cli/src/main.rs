//! `css`: generate synthetic datasets, train, run ablation grids, evaluate.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use css_core::data::{generate, generate_ids, split};
use css_core::io;
use css_core::metrics::IndicatorDiagnostics;
use css_core::trainer::{ablate, evaluate, predict, pseudo_label_quality, train, Trainer};
use css_core::{DatasetSplit, Error, RunConfig, RunState};


#[derive(Parser)]
#[command(name = "css", version, about = "Collaborative space supervision on synthetic segmentation tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset directory.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one configuration on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Continue from this checkpoint instead of the latest one.
        #[arg(long, requires = "resume")]
        checkpoint: Option<PathBuf>,
    },
    /// Train every `strategy indicator seed` line of a grid file.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score a checkpoint and write diagnostics and overlays.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Thresholds and temperatures; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn init_logging() {
    let level = match std::env::var("CSS_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> css_core::Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg = RunConfig::parse(&text).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse { line, message: format!("{}: {message}", path.display()) },
        other => other,
    })?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Run manifest, written before work starts and completed at the end.
struct Manifest {
    path: PathBuf,
    command: String,
    config: String,
    artifacts: Vec<String>,
    started: Instant,
}

impl Manifest {
    fn begin(out: &Path, command: &str, config: &RunConfig, artifacts: &[&str]) -> css_core::Result<Self> {
        fs::create_dir_all(out)?;
        let m = Manifest {
            path: out.join("run_manifest.txt"),
            command: command.to_string(),
            config: config.to_text(),
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            started: Instant::now(),
        };
        m.write("running")?;
        Ok(m)
    }

    fn write(&self, duration: &str) -> css_core::Result<()> {
        let mut text = format!(
            "command = {}\nengine_version = {}\nduration = {duration}\n",
            self.command,
            env!("CARGO_PKG_VERSION")
        );
        for a in &self.artifacts {
            text.push_str(&format!("artifact = {a}\n"));
        }
        text.push_str("# resolved config\n");
        text.push_str(&self.config);
        fs::write(&self.path, text)?;
        Ok(())
    }

    fn finish(self) -> css_core::Result<()> {
        self.write(&format!("{:.3}s", self.started.elapsed().as_secs_f64()))
    }
}

/// The dataset a config describes, built in memory.
fn build_split(cfg: &RunConfig) -> css_core::Result<(DatasetSplit, css_core::DataConfig)> {
    let data = cfg.data.data_config(cfg.seed)?;
    let pool = generate(&data)?;
    let mut s = split(pool, cfg.data.labeled_count, cfg.seed)?;
    s.validation = generate_ids(&data, data.count..data.count + cfg.data.validation_count)?;
    Ok((s, data))
}

fn load_data(dir: &Path, cfg: &RunConfig) -> css_core::Result<(DatasetSplit, usize)> {
    let (split, info) = io::import_dataset(dir)?;
    if let Some(c) = cfg.data.num_classes {
        if c != info.num_classes {
            return Err(Error::Config(format!("config says {c} classes, dataset has {}", info.num_classes)));
        }
    }
    Ok((split, info.num_classes))
}

fn latest_checkpoint(run_dir: &Path) -> css_core::Result<PathBuf> {
    let dir = run_dir.join("checkpoints");
    let entries = fs::read_dir(&dir).map_err(|e| Error::Format { path: dir.clone(), detail: e.to_string() })?;
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let path = entry?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_")?.strip_suffix(".bin")?.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|b| e > b.0) {
                best = Some((e, path));
            }
        }
    }
    best.map(|b| b.1).ok_or_else(|| Error::Format { path: dir, detail: "no checkpoint to resume from".into() })
}

fn run(command: Command) -> css_core::Result<()> {
    match command {
        Command::Generate { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let manifest = Manifest::begin(&out, "generate", &cfg, &["manifest.txt", "images/", "labels/"])?;
            let (split, data) = build_split(&cfg)?;
            let files = io::export_dataset(&out, &split, &data)?;
            log::info!("wrote {} files to {}", files.len(), out.display());
            manifest.finish()
        }
        Command::Train { config, data, out, seed, resume, checkpoint } => {
            let cfg = load_config(&config, seed)?;
            let manifest = Manifest::begin(&out, "train", &cfg, &["config.txt", "metrics.csv", "sampling.csv", "checkpoints/", "dumps/"])?;
            let (split, num_classes) = load_data(&data, &cfg)?;
            let state = if resume {
                let ckpt = match checkpoint {
                    Some(c) => c,
                    None => latest_checkpoint(&out)?,
                };
                log::info!("resuming from {}", ckpt.display());
                Trainer::resume(&cfg.train, &split, num_classes, &out, &ckpt)?.run()?
            } else {
                train(&cfg.train, &split, num_classes, Some(&out))?
            };
            if let Some(m) = state.history.last().and_then(|r| r.teacher_miou) {
                println!("final teacher mIoU {m:.4}");
            }
            manifest.finish()
        }
        Command::Ablate { config, grid, out, data, seed, jobs } => {
            let cfg = load_config(&config, seed)?;
            let text = fs::read_to_string(&grid).map_err(|e| Error::Config(format!("{}: {e}", grid.display())))?;
            let entries = css_core::grid::parse(&text)?;
            let manifest = Manifest::begin(&out, "ablate", &cfg, &["summary.csv", "aggregate.csv", "runs/"])?;
            let (split, num_classes) = match data {
                Some(dir) => load_data(&dir, &cfg)?,
                None => {
                    let (s, d) = build_split(&cfg)?;
                    (s, d.num_classes)
                }
            };
            let outcomes = ablate(&cfg.train, &split, num_classes, &entries, &out, jobs)?;
            let failed = outcomes.iter().filter(|o| o.exit_code != 0).count();
            println!("{} runs, {failed} failed; summary in {}", outcomes.len(), out.join("summary.csv").display());
            manifest.finish()
        }
        Command::Eval { checkpoint, data, out, config } => {
            let cfg = match config {
                Some(c) => load_config(&c, None)?,
                None => RunConfig::default(),
            };
            let manifest = Manifest::begin(
                &out,
                "eval",
                &cfg,
                &["miou.csv", "per_class_iou.csv", "indicator_pairs.csv", "indicator_bins.csv", "overlays/"],
            )?;
            let (split, num_classes) = load_data(&data, &cfg)?;
            let train_cfg = infer_model(&checkpoint, cfg.train.clone())?;
            let state = RunState::load(&checkpoint, &train_cfg, num_classes)?;
            eval(&state, &split, &train_cfg, num_classes, &out)?;
            manifest.finish()
        }
    }
}

/// Takes model width and representation size from the checkpoint itself.
fn infer_model(path: &Path, mut cfg: css_core::TrainConfig) -> css_core::Result<css_core::TrainConfig> {
    let tensors = io::read_checkpoint(path)?;
    let shape = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape().to_vec())
            .ok_or_else(|| Error::Format { path: path.to_path_buf(), detail: format!("missing tensor `{name}`") })
    };
    let rep = shape("student.rep2.w")?;
    let [width, dim] = rep.as_slice() else {
        return Err(Error::Format { path: path.to_path_buf(), detail: "bad representation head shape".into() });
    };
    cfg.model_width = *width;
    cfg.rep_dim = *dim;
    let epoch = tensors.iter().find(|(n, _)| n == "run.epoch").and_then(|(_, t)| t.item().ok()).unwrap_or(0.0);
    cfg.total_epochs = cfg.total_epochs.max(epoch as usize);
    Ok(cfg)
}

fn eval(state: &RunState, split: &DatasetSplit, cfg: &css_core::TrainConfig, num_classes: usize, out: &Path) -> css_core::Result<()> {
    use std::fmt::Write as _;
    let mut miou = String::from("set,model,miou\n");
    let mut per_class = String::from("source,class_id,iou\n");
    for (set, samples) in [("labeled", &split.labeled), ("validation", &split.validation)] {
        if samples.is_empty() {
            continue;
        }
        for (model, params) in [("teacher", &state.teacher.params), ("student", &state.student)] {
            let score = evaluate(params, samples, num_classes)?;
            let _ = writeln!(miou, "{set},{model},{:.6}", score.miou);
            for (k, iou) in score.per_class.iter().enumerate() {
                let _ = writeln!(per_class, "{set}_{model},{k},{}", iou.map(|v| format!("{v:.6}")).unwrap_or_default());
            }
        }
    }
    let mut diagnostics = IndicatorDiagnostics::new(10)?;
    if !state.bank.initialized_classes().is_empty() && split.unlabeled_len() > 0 {
        let q = pseudo_label_quality(&state.teacher.params, &state.bank, split, cfg, num_classes, Some(&mut diagnostics))?;
        for line in q.csv().lines().skip(1) {
            let _ = writeln!(per_class, "pseudo_{line}");
        }
    }
    fs::write(out.join("miou.csv"), miou)?;
    fs::write(out.join("per_class_iou.csv"), per_class)?;
    fs::write(out.join("indicator_pairs.csv"), diagnostics.pairs_csv())?;
    fs::write(out.join("indicator_bins.csv"), diagnostics.bins_csv())?;

    let overlays = out.join("overlays");
    fs::create_dir_all(&overlays)?;
    let samples: Vec<_> = split.labeled.iter().chain(&split.validation).collect();
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    for (s, o) in samples.iter().zip(predict(&state.teacher.params, &images)?) {
        let pred = css_core::supervision::logit_pseudo_labels(&o.logits)?.labels;
        io::write_ppm(&overlays.join(format!("{:05}.ppm", s.id)), s.width(), s.height(), &io::overlay(&s.image, &pred, num_classes)?)?;
    }
    log::info!("evaluation written to {}", out.display());
    Ok(())
}
