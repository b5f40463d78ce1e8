use std::fs;
use std::path::Path;

use css_core::data::{generate, generate_ids, split, DataConfig};
use css_core::trainer::{ablate, train, GridEntry, IndicatorMode, RunState, Strategy, Trainer};
use css_core::{DatasetSplit, TrainConfig};

const CLASSES: usize = 3;

fn data_config(seed: u64) -> DataConfig {
    DataConfig { seed, count: 10, height: 16, width: 16, num_classes: CLASSES, shapes_per_image: 2, noise_std: 0.02 }
}

fn tiny_split(seed: u64) -> DatasetSplit {
    let cfg = data_config(seed);
    let mut s = split(generate(&cfg).unwrap(), 3, seed).unwrap();
    s.validation = generate_ids(&cfg, 10..13).unwrap();
    s
}

fn cfg(strategy: Strategy, indicator: IndicatorMode) -> TrainConfig {
    TrainConfig {
        seed: 5,
        total_epochs: 3,
        warmup_epochs: 1,
        batch_size_labeled: 2,
        batch_size_unlabeled: 2,
        eval_every: 1,
        model_width: 4,
        rep_dim: 4,
        strategy,
        indicator,
        sampling: css_core::SamplingConfig { anchors_per_class: 8, negatives_per_anchor: 4, ..Default::default() },
        ..TrainConfig::default()
    }
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()))
}

#[test]
fn identical_configs_write_identical_artifacts() {
    let split = tiny_split(1);
    let c = cfg(Strategy::Mix, IndicatorMode::Mix);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = train(&c, &split, CLASSES, Some(a.path())).unwrap();
    let sb = train(&c, &split, CLASSES, Some(b.path())).unwrap();
    for name in ["metrics.csv", "sampling.csv", "per_class_iou.csv", "checkpoints/epoch_3.bin"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
    assert_eq!(sa.student.fingerprint(), sb.student.fingerprint());
    assert!(sa.history.iter().all(|r| r.loss.total.is_finite()));
}

#[test]
fn training_never_reads_unlabeled_ground_truth_without_quality_tracking() {
    let split = tiny_split(2);
    for strategy in Strategy::ALL {
        let c = TrainConfig { track_pseudo_quality: false, ..cfg(strategy, IndicatorMode::Mix) };
        train(&c, &split, CLASSES, None).unwrap();
    }
    assert_eq!(split.ground_truth_reads(), 0);

    let tracked = cfg(Strategy::Mix, IndicatorMode::Mix);
    train(&tracked, &split, CLASSES, None).unwrap();
    assert!(split.ground_truth_reads() > 0, "tracking reads ground truth at evaluation points only");
}

#[test]
fn teacher_moves_only_through_the_moving_average() {
    // with momentum 1 the average keeps the initial weights, so any other
    // write to the teacher would show up
    let split = tiny_split(3);
    let c = TrainConfig { teacher_momentum: 1.0, ..cfg(Strategy::Mix, IndicatorMode::Mix) };
    let initial = RunState::new(&c, CLASSES).unwrap();
    let done = train(&c, &split, CLASSES, None).unwrap();
    assert_eq!(done.teacher.params.fingerprint(), initial.teacher.params.fingerprint());
    assert_ne!(done.student.fingerprint(), initial.student.fingerprint());
}

#[test]
fn warmup_over_the_whole_run_matches_supervised_training() {
    let split = tiny_split(4);
    let warm = TrainConfig { warmup_epochs: 3, ..cfg(Strategy::Mix, IndicatorMode::Mix) };
    let sup = TrainConfig { warmup_epochs: 3, ..cfg(Strategy::SupervisedOnly, IndicatorMode::Conf) };
    let a = train(&warm, &split, CLASSES, None).unwrap();
    let b = train(&sup, &split, CLASSES, None).unwrap();
    assert_eq!(a.student, b.student);
    assert_eq!(a.teacher, b.teacher);
    assert_eq!(a.bank, b.bank);
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!(x.loss, y.loss);
        assert_eq!(x.teacher_miou, y.teacher_miou);
    }
}

#[test]
fn warmup_ignores_unlabeled_images() {
    // swapping every unlabeled image leaves the warm-up epochs untouched
    let base = tiny_split(6);
    let other = generate_ids(&data_config(99), 100..107).unwrap();
    let swapped = DatasetSplit::from_parts(base.labeled.clone(), other, base.validation.clone(), base.seed).unwrap();
    let c = TrainConfig { total_epochs: 2, warmup_epochs: 2, track_pseudo_quality: false, ..cfg(Strategy::Mix, IndicatorMode::Mix) };
    let a = train(&c, &base, CLASSES, None).unwrap();
    let b = train(&c, &swapped, CLASSES, None).unwrap();
    assert_eq!(a.bank, b.bank);
    assert_eq!(a.student, b.student);
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_uninterrupted_run() {
    let split = tiny_split(7);
    let c = TrainConfig { total_epochs: 4, ..cfg(Strategy::Cross, IndicatorMode::Smlr) };
    let full = tempfile::tempdir().unwrap();
    train(&c, &split, CLASSES, Some(full.path())).unwrap();

    let partial = tempfile::tempdir().unwrap();
    // an interrupted run left its CSVs (possibly with later rows) and checkpoints behind
    for name in ["metrics.csv", "sampling.csv", "config.txt"] {
        fs::copy(full.path().join(name), partial.path().join(name)).unwrap();
    }
    let resumed = Trainer::resume(&c, &split, CLASSES, partial.path(), &full.path().join("checkpoints/epoch_2.bin"))
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(resumed.epoch, 4);
    for name in ["metrics.csv", "sampling.csv", "checkpoints/epoch_4.bin", "per_class_iou.csv"] {
        assert_eq!(read(full.path(), name), read(partial.path(), name), "{name}");
    }
}

#[test]
fn every_strategy_and_indicator_trains_with_finite_losses() {
    let split = tiny_split(8);
    for strategy in Strategy::ALL {
        for mode in [IndicatorMode::Conf, IndicatorMode::Smlr, IndicatorMode::Mix] {
            let c = TrainConfig { total_epochs: 2, ..cfg(strategy, mode) };
            let s = train(&c, &split, CLASSES, None).unwrap();
            assert!(s.history.iter().all(|r| r.loss.total.is_finite()), "{strategy:?} {mode:?}");
            assert!(s.student.is_finite() && s.teacher.params.is_finite());
        }
    }
}

fn csv_column(text: &str, column: &str) -> Vec<String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == column).unwrap();
    lines.map(|l| l.split(',').nth(k).unwrap().to_string()).collect()
}

#[test]
fn ablation_summary_agrees_with_per_run_metrics() {
    let split = tiny_split(9);
    let base = TrainConfig { total_epochs: 2, ..cfg(Strategy::Mix, IndicatorMode::Mix) };
    let grid: Vec<GridEntry> = [1, 2, 3]
        .into_iter()
        .flat_map(|seed| {
            [(Strategy::LgtOnly, IndicatorMode::Conf), (Strategy::Mix, IndicatorMode::Mix)]
                .map(|(strategy, indicator)| GridEntry { strategy, indicator, seed })
        })
        .collect();
    let out = tempfile::tempdir().unwrap();
    let outcomes = ablate(&base, &split, CLASSES, &grid, out.path(), 2).unwrap();
    assert_eq!(outcomes.len(), 6);

    let final_teacher = |e: &GridEntry| -> f64 {
        let text = fs::read_to_string(out.path().join("runs").join(e.run_name()).join("metrics.csv")).unwrap();
        csv_column(&text, "teacher_miou").last().unwrap().parse().unwrap()
    };
    let summary = fs::read_to_string(out.path().join("summary.csv")).unwrap();
    let deltas = csv_column(&summary, "delta_vs_baseline");
    for (i, e) in grid.iter().enumerate() {
        let baseline = GridEntry { strategy: Strategy::LgtOnly, indicator: IndicatorMode::Conf, seed: e.seed };
        let delta: f64 = deltas[i].parse().unwrap();
        assert!((delta - (final_teacher(e) - final_teacher(&baseline))).abs() < 1e-12);
        assert_eq!(outcomes[i].final_miou.unwrap(), final_teacher(e));
    }

    let aggregate = fs::read_to_string(out.path().join("aggregate.csv")).unwrap();
    let means = csv_column(&aggregate, "mean_miou");
    let strategies = csv_column(&aggregate, "strategy");
    for (s, m) in strategies.iter().zip(&means) {
        let runs: Vec<f64> = outcomes.iter().filter(|o| o.entry.strategy.as_str() == s).map(|o| o.final_miou.unwrap()).collect();
        let mean = runs.iter().sum::<f64>() / runs.len() as f64;
        assert!((m.parse::<f64>().unwrap() - mean).abs() < 1e-12);
    }

    let dup = vec![grid[0], grid[0]];
    assert!(ablate(&base, &split, CLASSES, &dup, out.path(), 1).is_err());
    let empty = tempfile::tempdir().unwrap();
    assert!(ablate(&base, &split, CLASSES, &[], empty.path(), 1).unwrap().is_empty());
    assert_eq!(fs::read_to_string(empty.path().join("summary.csv")).unwrap().lines().count(), 1);
}
