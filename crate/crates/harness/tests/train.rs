use std::path::Path;

use dcd_harness::checkpoint;
use dcd_harness::config::{RunConfig, SweepConfig, TaskKind};
use dcd_harness::task;
use dcd_harness::train::{self, NonFiniteLoss, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, TEST_FILE};

fn small(arm: &str) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.arm = arm.into();
    c.model.width = 4;
    c.train.epochs = 2;
    c.train.batch_size = 16;
    c.task.train = 64;
    c.task.val = 32;
    c.task.test = 32;
    c.task.size = 8;
    c
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn zero_epochs_writes_only_the_initial_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small("dcd");
    c.train.epochs = 0;
    let splits = task::load(&c.task).unwrap();
    let r = train::train(&c, &splits, Some(dir.path())).unwrap();
    assert_eq!(r.metrics.len(), 1);
    let text = read(&dir.path().join(METRICS_FILE));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert_eq!(lines[0], "epoch,train_loss,train_acc,val_loss,val_acc,lr");
    assert!(lines[1].starts_with("0,"));
    for f in [TEST_FILE, CHECKPOINT_FILE, CONFIG_FILE] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = small("dcd");
    let splits = task::load(&c.task).unwrap();
    train::train(&c, &splits, Some(a.path())).unwrap();
    train::train(&c, &splits, Some(b.path())).unwrap();
    for f in [METRICS_FILE, TEST_FILE, CHECKPOINT_FILE, CONFIG_FILE] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(read(&a.path().join(METRICS_FILE)).lines().count(), 1 + 3);
}

#[test]
fn saved_config_reloads_to_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let c = small("static");
    let splits = task::load(&c.task).unwrap();
    train::train(&c, &splits, Some(dir.path())).unwrap();
    let back = RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(back, c);
}

#[test]
fn checkpoint_reproduces_test_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let c = small("dcd");
    let splits = task::load(&c.task).unwrap();
    let r = train::train(&c, &splits, Some(dir.path())).unwrap();
    let mut m = train::build_model(&c, &splits.test).unwrap();
    checkpoint::read_file(&dir.path().join(CHECKPOINT_FILE), &mut m).unwrap();
    let (loss, acc) = train::evaluate(&mut m, &splits.test).unwrap();
    assert_eq!(loss.to_bits(), r.test.test_loss.to_bits());
    assert_eq!(acc, r.test.test_acc);
}

#[test]
fn linear_control_is_fit_exactly() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/linear_control.toml");
    let c = RunConfig::load(&root).unwrap();
    assert_eq!(c.task.kind, TaskKind::Linear);
    let splits = task::load(&c.task).unwrap();
    let r = train::train(&c, &splits, None).unwrap();
    let best = r.metrics.iter().map(|m| m.train_acc).fold(0.0, f64::max);
    assert_eq!(best, 1.0, "best train accuracy {best}");
}

#[test]
fn learning_rate_blowup_aborts_with_a_note() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small("static");
    c.optim.lr = 1e200;
    c.optim.weight_decay = 0.0;
    let splits = task::load(&c.task).unwrap();
    let err = train::train(&c, &splits, Some(dir.path())).unwrap_err();
    let nf = err.downcast_ref::<NonFiniteLoss>().unwrap_or_else(|| panic!("{err:#}"));
    assert!(nf.epoch >= 1);
    assert!(read(&dir.path().join("failure.txt")).starts_with("non-finite "));
    assert!(!dir.path().join(CHECKPOINT_FILE).exists());
}

#[test]
fn workers_split_the_batch_deterministically() {
    let mut c = small("dcd");
    c.train.workers = 2;
    let splits = task::load(&c.task).unwrap();
    let a = train::train(&c, &splits, None).unwrap();
    let b = train::train(&c, &splits, None).unwrap();
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
    }
    let single = train::train(&small("dcd"), &splits, None).unwrap();
    // the untrained evaluation does not depend on the shard count
    assert_eq!(a.metrics[0], single.metrics[0]);
    assert!(a.metrics.iter().all(|m| m.train_loss.is_finite()));
}

#[test]
fn sweep_writes_per_run_and_aggregate_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small("dcd");
    c.train.epochs = 1;
    c.sweep = Some(SweepConfig {
        arms: vec!["static".into(), "dcd".into(), "vanilla_tau30".into()],
        seeds: vec![1, 2],
    });
    let res = train::sweep(&c, Some(dir.path())).unwrap();
    assert_eq!(res.tests.len(), 6);
    assert_eq!(res.curves.len(), 6 * 2);
    assert_eq!(res.summary.len(), 3);
    for arm in ["static", "dcd", "vanilla_tau30"] {
        for s in [1, 2] {
            let d = dir.path().join(arm).join(format!("seed{s}"));
            assert!(d.join(METRICS_FILE).exists(), "{}", d.display());
        }
        let accs: Vec<f64> = res.tests.iter().filter(|t| t.arm == arm).map(|t| t.test_acc).collect();
        let mean = accs.iter().sum::<f64>() / 2.0;
        assert!((res.mean_acc(arm).unwrap() - mean).abs() < 1e-15);
    }
    let curves = read(&dir.path().join("curves.csv"));
    assert!(curves.starts_with("arm,seed,epoch,"));
    assert_eq!(curves.lines().count(), 1 + 12);
    assert_eq!(read(&dir.path().join("summary.csv")).lines().count(), 1 + 3);
    assert_eq!(read(&dir.path().join("tests.csv")).lines().count(), 1 + 6);
}

#[test]
fn step_schedule_is_logged() {
    let mut c = small("static");
    c.train.epochs = 3;
    c.optim.schedule = dcd_harness::config::Schedule::Step;
    c.optim.step_every = 2;
    let splits = task::load(&c.task).unwrap();
    let r = train::train(&c, &splits, None).unwrap();
    let lrs: Vec<f64> = r.metrics.iter().map(|m| m.lr).collect();
    assert_eq!(lrs[1], 0.1);
    assert_eq!(lrs[2], 0.1);
    assert!((lrs[3] - 0.01).abs() < 1e-15);
}
