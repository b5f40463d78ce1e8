//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Optional arguments select criteria by number.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use css_core::data::{generate, generate_ids, split};
use css_core::gradcheck::{loss_suite, primitive_suite};
use css_core::grad::Tensor;
use css_core::losses::poly_lr;
use css_core::model::{ModelConfig, ModelParams, TeacherState};
use css_core::proto::{Centroid, Centroids, PrototypeBank};
use css_core::sampling::{negative_class_distribution, sample_negatives, SamplingConfig};
use css_core::seeds::{rng_for, Rng};
use css_core::supervision::{fuse_mix, indicator_distribution, indicator_table, lookup, PseudoLabelBundle};
use css_core::trainer::{strategy_dispatch, train, GridEntry, IndicatorMode, Strategy};
use css_core::{DatasetSplit, LabelMap, RunConfig};
use rand::Rng as _;

type Criterion<F> = (usize, &'static str, F);
type ToyCheck = fn(&ToyResults) -> Check;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }
}

type Check = Result<Verdict, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn unit_vector(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_bank(rng: &mut Rng, classes: usize, d: usize) -> PrototypeBank {
    let mut bank = PrototypeBank::new(classes, d, 0.9).expect("valid bank");
    for c in 0..classes {
        bank.set_prototype(c, &unit_vector(rng, d)).expect("unit prototype");
    }
    bank
}

/// `[d, h, w]` tensor whose columns are unit vectors.
fn random_reps(rng: &mut Rng, d: usize, h: usize, w: usize) -> Tensor {
    let cols: Vec<Vec<f64>> = (0..h * w).map(|_| unit_vector(rng, d)).collect();
    Tensor::from_fn([d, h, w], |i| cols[i % (h * w)][i / (h * w)])
}

fn gradients() -> Check {
    let start = Instant::now();
    let (mut worst, mut worst_name, mut checks) = (0.0f64, String::new(), 0usize);
    for seed in 0..100 {
        let results = primitive_suite(seed).map_err(err)?.into_iter().chain(loss_suite(seed).map_err(err)?);
        for (name, r) in results {
            checks += 1;
            if r.max_relative_error > worst {
                worst = r.max_relative_error;
                worst_name = format!("{name} (seed {seed})");
            }
        }
    }
    let elapsed = start.elapsed();
    Ok(Verdict::new(
        worst < 1e-5 && elapsed < Duration::from_secs(60),
        format!("{checks} checks, worst relative error {worst:.2e} in {worst_name}, {:.1}s", elapsed.as_secs_f64()),
    ))
}

/// Direct evaluation of one entry of the indicator distribution.
fn indicator_brute_force(sims: &[f64], k: usize, tau: f64) -> f64 {
    let own = (sims[k] / tau).exp();
    let mut others = 0.0;
    for (j, s) in sims.iter().enumerate() {
        if j != k {
            others += (s / tau).exp();
        }
    }
    own / (own + others)
}

fn indicator_oracle() -> Check {
    let mut rng = rng_for(11, "acceptance-indicator", 0);
    let (classes, d, h, w, tau) = (5, 8, 100, 100, 0.5);
    let bank = random_bank(&mut rng, classes, d);
    let table = indicator_table(&random_reps(&mut rng, d, h, w), &bank, tau).map_err(err)?;
    let n = h * w;
    let worst_sum = (0..n)
        .map(|p| ((0..classes).map(|c| table.data()[c * n + p]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    let mut worst_entry = 0.0f64;
    let example = indicator_distribution(&[0.9, 0.3, -0.2], 0.5).map_err(err)?[0];
    let mut vectors = vec![(vec![0.9, 0.3, -0.2], 0.5)];
    while vectors.len() < 100 {
        let len = rng.random_range(2..=8);
        vectors.push(((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), rng.random_range(0.05..2.0)));
    }
    for (sims, tau) in &vectors {
        let p = indicator_distribution(sims, *tau).map_err(err)?;
        for (k, got) in p.iter().enumerate() {
            worst_entry = worst_entry.max((got - indicator_brute_force(sims, k, *tau)).abs());
        }
    }
    Ok(Verdict::new(
        worst_sum < 1e-9 && worst_entry < 1e-12 && (example - 0.708).abs() < 5e-4,
        format!("max |sum-1| {worst_sum:.1e} over {n} pixels, max brute-force gap {worst_entry:.1e} over 100 vectors, example {example:.4}"),
    ))
}

fn fusion_oracle() -> Check {
    let mut rng = rng_for(12, "acceptance-fusion", 0);
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let a: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..5)).collect();
        let b: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..5)).collect();
        let fused = fuse_mix(&LabelMap::new(h, w, a.clone()).map_err(err)?, &LabelMap::new(h, w, b.clone()).map_err(err)?).map_err(err)?;
        for i in 0..h * w {
            let keep = a[i] == b[i];
            if fused.valid.data()[i] != keep || (keep && fused.labels.data()[i] != a[i]) {
                mismatches += 1;
            }
        }
    }

    // cross: each space learns the other's labels, gated by the indicator of
    // the space the labels came from
    let mut wiring_errors = 0usize;
    let (du, dw) = (0.6, 0.5);
    for trial in 0..20 {
        let (c, d, h, w) = (4, 6, 6, 7);
        let bank = random_bank(&mut rng, c, d);
        let logits = Tensor::from_fn([c, h, w], |_| rng.random_range(-3.0..3.0));
        let reps = random_reps(&mut rng, d, h, w);
        let tau = if trial % 2 == 0 { 0.1 } else { 0.5 };
        let b = PseudoLabelBundle::compute(&logits, &reps, &bank, tau, du, dw).map_err(err)?;
        for mode in [IndicatorMode::Conf, IndicatorMode::Smlr, IndicatorMode::Mix] {
            let wiring = strategy_dispatch(Strategy::Cross, mode, &b).map_err(err)?.ok_or("cross must supervise")?;
            for p in 0..h * w {
                let ok = wiring.logit.labels.data()[p] == b.y_rep.data()[p]
                    && wiring.logit.valid.data()[p] == (b.sim_ind.data()[p] >= dw)
                    && wiring.rep.labels.data()[p] == b.y_lgt.data()[p]
                    && wiring.rep.valid.data()[p] == (b.conf.data()[p] >= du);
                if !ok {
                    wiring_errors += 1;
                }
            }
        }
        let reps_ind = lookup(&b.indicators, &b.y_rep).map_err(err)?;
        if reps_ind.data() != b.sim_ind.data() {
            wiring_errors += 1;
        }
    }
    Ok(Verdict::new(
        mismatches == 0 && wiring_errors == 0,
        format!("{mismatches} mix mismatches over 1000 pairs, {wiring_errors} cross wiring errors"),
    ))
}

fn ema_oracles() -> Check {
    let mut rng = rng_for(13, "acceptance-ema", 0);
    let (classes, d, alpha) = (3, 5, 0.9);
    let mut bank = PrototypeBank::new(classes, d, alpha).map_err(err)?;
    let mut pre: Vec<Option<Vec<f64>>> = vec![None; classes];
    let mut proto: Vec<Option<Vec<f64>>> = vec![None; classes];
    let mut worst_bank = 0.0f64;
    for _ in 0..50 {
        let mut centroids = Centroids::default();
        for c in 0..classes {
            if rng.random_bool(0.7) {
                centroids.classes.insert(c, Centroid { vector: unit_vector(&mut rng, d), count: 1 });
            }
        }
        bank.ema_update(&centroids).map_err(err)?;
        for (&c, centroid) in &centroids.classes {
            let next: Vec<f64> = match &proto[c] {
                None => centroid.vector.clone(),
                Some(p) => p.iter().zip(&centroid.vector).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect(),
            };
            let norm = dot(&next, &next).sqrt();
            proto[c] = Some(next.iter().map(|v| v / norm).collect());
            pre[c] = Some(next);
        }
        for (c, expected) in pre.iter().enumerate() {
            if let Some(expected) = expected {
                let got = bank.pre_normalization(c).ok_or("class should be initialized")?;
                worst_bank = got.iter().zip(expected).map(|(g, e)| (g - e).abs()).fold(worst_bank, f64::max);
            }
        }
    }

    let cfg = ModelConfig { in_channels: 3, width: 4, num_classes: 3, rep_dim: 4 };
    let m = 0.99;
    let initial = ModelParams::init(cfg, 0).map_err(err)?;
    let mut teacher = TeacherState::from_student(&initial, m).map_err(err)?;
    let students: Vec<ModelParams> = (1..=50).map(|s| ModelParams::init(cfg, s)).collect::<Result<_, _>>().map_err(err)?;
    for s in &students {
        teacher.ema_update(s).map_err(err)?;
    }
    // closed form: m^T t0 + sum_k (1 - m) m^(T-k) s_k
    let mut worst_teacher = 0.0f64;
    for (t_idx, t) in teacher.params.tensors().iter().enumerate() {
        for (i, got) in t.data().iter().enumerate() {
            let mut expected = m.powi(50) * initial.tensors()[t_idx].data()[i];
            for (k, s) in students.iter().enumerate() {
                expected += (1.0 - m) * m.powi(50 - (k as i32 + 1)) * s.tensors()[t_idx].data()[i];
            }
            worst_teacher = worst_teacher.max((got - expected).abs());
        }
    }
    Ok(Verdict::new(
        worst_bank < 1e-12 && worst_teacher < 1e-12,
        format!("50 steps: prototype pre-normalization gap {worst_bank:.1e}, teacher gap {worst_teacher:.1e}"),
    ))
}

fn negative_sampling() -> Check {
    let mut worst = 0.0f64;
    for config in 0..3u64 {
        let mut rng = rng_for(14, "acceptance-negatives", config);
        let classes = 3 + config as usize;
        let bank = random_bank(&mut rng, classes, 4);
        let tau = [0.5, 1.0, 0.2][config as usize];
        let anchor = bank.prototype(0).ok_or("initialized")?.to_vec();
        let weights: Vec<f64> = (0..classes)
            .map(|k| if k == 0 { 0.0 } else { (dot(&anchor, bank.prototype(k).expect("initialized")) / tau).exp() })
            .collect();
        let z: f64 = weights.iter().sum();
        let expected: Vec<f64> = weights.iter().map(|w| w / z).collect();
        for (k, p) in negative_class_distribution(&bank, 0, &vec![true; classes], tau).map_err(err)? {
            if (p - expected[k]).abs() > 1e-12 {
                return Ok(Verdict::new(false, format!("config {config}: class {k} probability {p} vs {}", expected[k])));
            }
        }
        // pixel k*10+j belongs to class k
        let pools: Vec<Vec<usize>> = (0..classes).map(|k| (0..10).map(|j| k * 10 + j).collect()).collect();
        let cfg = SamplingConfig { negatives_per_anchor: 100_000, tau_neg: tau, ..SamplingConfig::default() };
        let draws = sample_negatives(&bank, 0, &pools, &cfg, &mut rng).map_err(err)?;
        let mut counts = vec![0usize; classes];
        draws.iter().for_each(|p| counts[p / 10] += 1);
        let tv = (0..classes).map(|k| (counts[k] as f64 / draws.len() as f64 - expected[k]).abs()).sum::<f64>() / 2.0;
        worst = worst.max(tv);
    }
    Ok(Verdict::new(worst < 0.01, format!("worst total variation {worst:.4} over 3 configurations of 100k draws")))
}

type Setting = (Strategy, IndicatorMode);

/// Seed, final teacher mIoU and final pseudo-label mIoU (logit, rep, mix).
type ToyRun = (u64, f64, [f64; 3]);

/// Final scores of each toy benchmark run.
struct ToyResults {
    runs: BTreeMap<Setting, Vec<ToyRun>>,
    slowest: Duration,
}

impl ToyResults {
    fn mean(&self, key: Setting) -> Option<f64> {
        let v = self.runs.get(&key)?;
        Some(v.iter().map(|r| r.1).sum::<f64>() / v.len() as f64)
    }

    fn describe(&self, key: Setting) -> String {
        let runs = self.runs.get(&key).map(|v| v.iter().map(|r| format!("{:.4}", r.1)).collect::<Vec<_>>().join("/")).unwrap_or_default();
        format!("{}+{} {:.4} [{runs}]", key.0.as_str(), key.1.as_str(), self.mean(key).unwrap_or(f64::NAN))
    }
}

fn toy_split(cfg: &RunConfig) -> Result<(DatasetSplit, usize), String> {
    let data = cfg.data.data_config(cfg.seed).map_err(err)?;
    let mut s = split(generate(&data).map_err(err)?, cfg.data.labeled_count, cfg.seed).map_err(err)?;
    s.validation = generate_ids(&data, data.count..data.count + cfg.data.validation_count).map_err(err)?;
    Ok((s, data.num_classes))
}

fn toy_benchmark() -> Result<ToyResults, String> {
    let root = repo_root().join("configs");
    let cfg = RunConfig::parse(&fs::read_to_string(root.join("toy_benchmark.conf")).map_err(err)?).map_err(err)?;
    let grid: Vec<GridEntry> = css_core::grid::parse(&fs::read_to_string(root.join("toy_benchmark.grid")).map_err(err)?).map_err(err)?;
    let (split, classes) = toy_split(&cfg)?;
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("toy_benchmark");
    let _ = fs::remove_dir_all(&out);
    let mut results = ToyResults { runs: BTreeMap::new(), slowest: Duration::ZERO };
    for entry in grid {
        let run_cfg = css_core::TrainConfig { seed: entry.seed, strategy: entry.strategy, indicator: entry.indicator, ..cfg.train.clone() };
        let start = Instant::now();
        let state = train(&run_cfg, &split, classes, Some(&out.join(entry.run_name()))).map_err(err)?;
        let elapsed = start.elapsed();
        results.slowest = results.slowest.max(elapsed);
        let last = state.history.last().ok_or("run recorded no epochs")?;
        let miou = last.teacher_miou.ok_or("final epoch must be evaluated")?;
        let pseudo = last.pseudo_miou.ok_or("final epoch must score pseudo-labels")?;
        println!("  toy run {}: teacher mIoU {miou:.4}, pseudo lgt/rep/mix {:.4}/{:.4}/{:.4}, {:.0}s", entry.run_name(), pseudo[0], pseudo[1], pseudo[2], elapsed.as_secs_f64());
        results.runs.entry((entry.strategy, entry.indicator)).or_default().push((entry.seed, miou, pseudo));
    }
    Ok(results)
}

const MIX: Setting = (Strategy::Mix, IndicatorMode::Mix);
const CROSS: Setting = (Strategy::Cross, IndicatorMode::Mix);
const BASELINE: Setting = (Strategy::LgtOnly, IndicatorMode::Conf);
const MIX_CONF: Setting = (Strategy::Mix, IndicatorMode::Conf);

fn within_budget(toy: &ToyResults) -> bool {
    toy.slowest <= Duration::from_secs(15 * 60)
}

fn strategy_ordering(toy: &ToyResults) -> Check {
    let (mix, cross, base) = (toy.mean(MIX).ok_or("missing mix runs")?, toy.mean(CROSS).ok_or("missing cross runs")?, toy.mean(BASELINE).ok_or("missing baseline runs")?);
    let gain = 100.0 * (mix - base);
    Ok(Verdict::new(
        mix >= cross && gain >= 1.0 && within_budget(toy),
        format!(
            "{} vs {} vs {}; mix - lgt_only = {gain:+.2} points; slowest run {:.0}s",
            toy.describe(MIX),
            toy.describe(CROSS),
            toy.describe(BASELINE),
            toy.slowest.as_secs_f64()
        ),
    ))
}

fn pseudo_label_quality(toy: &ToyResults) -> Check {
    let runs = toy.runs.get(&MIX).ok_or("missing mix runs")?;
    let n = runs.len() as f64;
    let lgt = runs.iter().map(|r| r.2[0]).sum::<f64>() / n;
    let mix = runs.iter().map(|r| r.2[2]).sum::<f64>() / n;
    let per_seed: Vec<String> = runs.iter().map(|r| format!("s{} {:.4}/{:.4}", r.0, r.2[2], r.2[0])).collect();
    Ok(Verdict::new(mix >= lgt, format!("mean mix {mix:.4} vs lgt {lgt:.4} on sampled unlabeled pixels ({})", per_seed.join(", "))))
}

fn indicator_ordering(toy: &ToyResults) -> Check {
    let (mix, conf) = (toy.mean(MIX).ok_or("missing mix runs")?, toy.mean(MIX_CONF).ok_or("missing mix+conf runs")?);
    Ok(Verdict::new(mix >= conf, format!("{} vs {}", toy.describe(MIX), toy.describe(MIX_CONF))))
}

fn css(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_css"))
        .args(args.iter().map(|a| a.as_ref()))
        .env("CSS_LOG", "quiet")
        .output()
        .map_err(err)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("css exited with {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

/// Every CSV below `dir`, keyed by relative path.
fn csv_files(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.insert(path.strip_prefix(dir).map_err(err)?.to_path_buf(), fs::read(&path).map_err(err)?);
            }
        }
    }
    Ok(out)
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = dir.path();
    let config = fs::read_to_string(repo_root().join("configs/smoke.conf")).map_err(err)?.replace("supervised_only", "mix");
    let cfg = d.join("run.conf");
    fs::write(&cfg, config).map_err(err)?;
    let grid = d.join("grid.txt");
    fs::write(&grid, "mix+ind 1\nbaseline 1\ncross 2\n").map_err(err)?;

    let mut compared = 0usize;
    let mut differing = Vec::new();
    let mut outputs: Vec<BTreeMap<PathBuf, Vec<u8>>> = Vec::new();
    for pass in ["a", "b"] {
        let root = d.join(pass);
        let data = root.join("data");
        css(&[&"generate", &"--config", &cfg, &"--out", &data])?;
        css(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &root.join("train")])?;
        css(&[&"eval", &"--checkpoint", &root.join("train/checkpoints/epoch_2.bin"), &"--data", &data, &"--out", &root.join("eval")])?;
        css(&[&"ablate", &"--config", &cfg, &"--grid", &grid, &"--out", &root.join("ablate"), &"--jobs", &"2"])?;
        outputs.push(csv_files(&root)?);
    }
    if outputs[0].keys().ne(outputs[1].keys()) {
        return Ok(Verdict::new(false, "re-runs produced different sets of CSV files"));
    }
    for (path, bytes) in &outputs[0] {
        compared += 1;
        if outputs[1][path] != *bytes {
            differing.push(path.display().to_string());
        }
    }
    let digests = [d.join("a/data"), d.join("b/data")]
        .iter()
        .map(|p| css_core::io::directory_digest(p, &["run_manifest.txt"]))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    Ok(Verdict::new(
        compared >= 10 && differing.is_empty() && digests[0] == digests[1],
        format!("{compared} CSVs from generate/train/eval/ablate compared, {} differ {differing:?}; dataset digests equal: {}", differing.len(), digests[0] == digests[1]),
    ))
}

fn poly_schedule() -> Check {
    let (base, total) = (0.0064, 40.0);
    let start = poly_lr(base, 0.0, total).map_err(err)?;
    let end = poly_lr(base, total, total).map_err(err)?;
    let mid = poly_lr(base, total / 2.0, total).map_err(err)?;
    let expected_mid = base * (0.9 * 0.5f64.ln()).exp();
    Ok(Verdict::new(
        (start - 0.0064).abs() < 1e-12 && end.abs() < 1e-12 && (mid - expected_mid).abs() < 1e-12,
        format!("start {start}, end {end}, midpoint {mid:.15} (expected {expected_mid:.15})"),
    ))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);

    let mut verdicts: Vec<(usize, &str, Check)> = Vec::new();
    let simple: [Criterion<fn() -> Check>; 6] = [
        (1, "gradient checks", gradients),
        (2, "similarity indicator oracle", indicator_oracle),
        (3, "fusion oracle", fusion_oracle),
        (4, "moving-average oracles", ema_oracles),
        (5, "negative sampling distribution", negative_sampling),
        (9, "determinism", determinism),
    ];
    for (n, name, f) in simple.iter().filter(|c| wanted(c.0) && c.0 < 6) {
        verdicts.push((*n, name, f()));
    }
    if [6, 7, 8].into_iter().any(wanted) {
        let toy = toy_benchmark();
        let toy_checks: [Criterion<ToyCheck>; 3] = [
            (6, "strategy ordering on the toy benchmark", strategy_ordering),
            (7, "pseudo-label quality on the toy benchmark", pseudo_label_quality),
            (8, "indicator ordering on the toy benchmark", indicator_ordering),
        ];
        for (n, name, f) in toy_checks.into_iter().filter(|c| wanted(c.0)) {
            verdicts.push((n, name, toy.as_ref().map_err(Clone::clone).and_then(f)));
        }
    }
    for (n, name, f) in simple.iter().filter(|c| wanted(c.0) && c.0 == 9) {
        verdicts.push((*n, name, f()));
    }
    if wanted(10) {
        verdicts.push((10, "poly learning-rate schedule", poly_schedule()));
    }

    let mut failed = 0;
    for (n, name, v) in &verdicts {
        let (status, detail) = match v {
            Ok(v) => (if v.pass { "PASS" } else { "FAIL" }, v.detail.clone()),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("criterion {n:>2} {status} {name}: {detail}");
    }
    println!("{} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
