mod common;

use common::tiny_arch;
use factorizephys::data::{write_dataset, DatasetConfig, SynthConfig};
use factorizephys::harness::{
    evaluate, evaluate_oracle, load_dataset, read_checkpoint, sweep, train, write_checkpoint, HarnessError,
    SweepConfig, TrainConfig, CHECKPOINT_FILE, LOSS_LOG_FILE,
};
use factorizephys::model::{default_arch, param_init};
use factorizephys::signal::MetricConfig;
use std::path::Path;

const FRAMES: usize = 61;

fn tiny_dataset(dir: &Path) {
    let cfg = DatasetConfig {
        clips: 4,
        frames: 2 * FRAMES,
        clip: SynthConfig { height: 28, width: 28, ..Default::default() },
        ..Default::default()
    };
    write_dataset(&cfg, dir).unwrap();
}

fn tiny_train(data: &Path, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        seed,
        data: data.to_path_buf(),
        ..Default::default()
    }
}

#[test]
fn zero_epochs_leaves_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data);
    let arch = tiny_arch(FRAMES);
    let (m, p) = train(&tiny_train(&data, 0, 5), &arch, &tmp.path().join("run")).unwrap();
    assert!(m.epoch_losses.is_empty());
    assert_eq!(m.total_steps, 0);
    assert_eq!(p, param_init(&arch, 5));
    let log = std::fs::read_to_string(tmp.path().join("run").join(LOSS_LOG_FILE)).unwrap();
    assert_eq!(log, "epoch,step,lr,loss\n");
}

#[test]
fn training_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data);
    let arch = tiny_arch(FRAMES);
    let cfg = tiny_train(&data, 3, 7);
    let (a, pa) = train(&cfg, &arch, &tmp.path().join("a")).unwrap();
    let (b, pb) = train(&cfg, &arch, &tmp.path().join("b")).unwrap();
    assert_eq!(a.epoch_losses.len(), 3);
    assert_eq!(a.train_chunks, 6);
    assert_eq!(a.total_steps, 9);
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(pa, pb);
    for f in [LOSS_LOG_FILE, "report.json", "report.csv", CHECKPOINT_FILE] {
        let ra = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let rb = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(ra, rb, "{f}");
    }
    assert!(a.epoch_losses.iter().all(|l| l.is_finite() && (0.0..=2.0).contains(l)));

    let (c, _) = train(&tiny_train(&data, 3, 8), &arch, &tmp.path().join("c")).unwrap();
    assert_ne!(c.epoch_losses, a.epoch_losses);
}

#[test]
fn evaluation_reads_back_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data);
    let arch = tiny_arch(FRAMES);
    let run = tmp.path().join("run");
    let (m, params) = train(&tiny_train(&data, 1, 1), &arch, &run).unwrap();
    let (arch2, p2) = read_checkpoint(&m.checkpoint).unwrap();
    assert_eq!(arch2, arch);
    assert_eq!(p2, params);
    let with = evaluate(&m.checkpoint, &data, true).unwrap();
    let stored = std::fs::read_to_string(run.join("report.json")).unwrap();
    assert_eq!(with.to_json(), stored);
    let without = evaluate(&m.checkpoint, &data, false).unwrap();
    assert_eq!(with.n_chunks, 2);
    assert_eq!(without.n_chunks, 2);
    assert!((0.0..=1.0).contains(&with.macc.value));
}

#[test]
fn oracle_path_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_dataset(tmp.path());
    let ds = load_dataset(tmp.path(), &tiny_arch(FRAMES)).unwrap();
    let r = evaluate_oracle(&ds.eval, &MetricConfig::default()).unwrap();
    assert_eq!(r.mae_hr.value, 0.0);
    assert!((r.macc.value - 1.0).abs() < 1e-9);
}

#[test]
fn mismatched_checkpoint_and_data_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data);
    let arch = default_arch();
    let ckpt = tmp.path().join("m.fpck");
    write_checkpoint(&ckpt, &arch, &param_init(&arch, 0)).unwrap();
    assert!(matches!(evaluate(&ckpt, &data, true), Err(HarnessError::Model(_))));
    assert!(evaluate(&tmp.path().join("nope.fpck"), &data, true).is_err());
}

#[test]
fn bad_configs_are_rejected() {
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { max_lr: 0.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig::from_toml("epochs = \"ten\"").is_err());
    let cfg = TrainConfig::from_toml("epochs = 2\nseed = 100\n").unwrap();
    assert_eq!((cfg.epochs, cfg.seed, cfg.batch_size), (2, 100, 4));
}

#[test]
fn sweep_emits_a_report_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data);
    let cfg = SweepConfig {
        train: TrainConfig { max_train_chunks: Some(2), ..tiny_train(&data, 1, 0) },
        ranks: vec![1, 2],
        steps: vec![2, 3],
        ..Default::default()
    };
    let out = tmp.path().join("sweep");
    let cells = sweep(&cfg, &tiny_arch(FRAMES), &out).unwrap();
    assert_eq!(cells.len(), 3 + 4);
    for c in &cells {
        assert!(c.report.exists(), "{}", c.name);
        assert!(c.mae_hr.is_finite());
    }
    assert!(out.join("sweep.json").exists());
}
