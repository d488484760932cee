//! SGD training loop, evaluation, metric files and arm sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dcd_core::layers::ForwardCtx;
use dcd_core::zoo::Model;
use dcd_core::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::task::{self, Dataset, Splits};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TEST_FILE: &str = "test.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub arm: String,
    pub seed: u64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug)]
pub struct RunResult {
    pub metrics: Vec<EpochMetrics>,
    pub test: TestMetrics,
    pub model: Model,
}

/// Raised when the loss, an activation or an updated parameter stops being finite.
#[derive(Debug)]
pub struct NonFiniteLoss {
    pub epoch: usize,
    pub step: usize,
    /// `loss`, `activations` or `parameters`.
    pub what: &'static str,
}

impl std::fmt::Display for NonFiniteLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "non-finite {} at epoch {} step {}", self.what, self.epoch, self.step)
    }
}

impl std::error::Error for NonFiniteLoss {}

pub fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<Model> {
    let g = cfg.graph(data.channels, data.size, data.classes)?;
    Ok(Model::new(g, cfg.seed)?)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.cols();
    labels
        .iter()
        .enumerate()
        .filter(|(i, y)| argmax(&logits.data()[i * k..(i + 1) * k]) == **y)
        .count()
}

/// Mean loss and accuracy in inference mode.
pub fn evaluate(model: &mut Model, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut hits) = (0.0, 0);
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let logits = model.forward(&mut tape, xv, &mut ForwardCtx::eval())?;
        let l = tape.softmax_cross_entropy(logits, &y)?;
        loss += tape.value(l).item()? * chunk.len() as f64;
        hits += correct(tape.value(logits), &y);
    }
    Ok((loss / data.len() as f64, hits as f64 / data.len() as f64))
}

struct StepOutput {
    loss: f64,
    hits: usize,
    grads: BTreeMap<String, Tensor>,
}

fn step_shard(model: &mut Model, x: Tensor, y: &[usize]) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let logits = model.forward(&mut tape, xv, &mut ForwardCtx::train())?;
    let l = tape.softmax_cross_entropy(logits, y)?;
    let loss = tape.value(l).item()?;
    let hits = correct(tape.value(logits), y);
    let grads = tape.backward(l, 1.0)?.into_map();
    Ok(StepOutput { loss, hits, grads })
}

/// One minibatch. With several workers the batch is split into contiguous
/// shards, each normalized by its own batch statistics; gradients are
/// averaged weighted by shard size in shard order and the running statistics
/// of shard 0 are kept.
fn step(model: &mut Model, data: &Dataset, idx: &[usize], workers: usize) -> Result<StepOutput> {
    let shards = workers.min(idx.len()).max(1);
    if shards == 1 {
        let (x, y) = data.batch(idx)?;
        return step_shard(model, x, &y);
    }
    let per = idx.len().div_ceil(shards);
    let parts: Vec<&[usize]> = idx.chunks(per).collect();
    let results: Vec<(Result<StepOutput>, Model)> = std::thread::scope(|s| {
        let handles: Vec<_> = parts
            .iter()
            .map(|part| {
                let mut m = model.clone();
                s.spawn(move || {
                    let r = data.batch(part).and_then(|(x, y)| step_shard(&mut m, x, &y));
                    (r, m)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let n = idx.len() as f64;
    let mut merged = StepOutput {
        loss: 0.0,
        hits: 0,
        grads: BTreeMap::new(),
    };
    let mut first = None;
    for ((r, m), part) in results.into_iter().zip(&parts) {
        let out = r?;
        let w = part.len() as f64 / n;
        merged.loss += w * out.loss;
        merged.hits += out.hits;
        for (k, g) in out.grads {
            let g = g.scale(w)?;
            match merged.grads.get_mut(&k) {
                Some(acc) => *acc = acc.add(&g)?,
                None => {
                    merged.grads.insert(k, g);
                }
            }
        }
        if first.is_none() {
            first = Some(m);
        }
    }
    let first = first.expect("at least one shard");
    for (dst, src) in model.layers_mut().iter_mut().zip(first.layers()) {
        let (m, v) = src.running_stats();
        dst.set_running_stats(m.to_vec(), v.to_vec())?;
    }
    Ok(merged)
}

/// Writes `failure.txt` next to the metrics and hands the error back.
fn abort(out: Option<&Path>, err: NonFiniteLoss, detail: &str) -> anyhow::Error {
    if let Some(dir) = out {
        let note = if detail.is_empty() {
            format!("{err}\n")
        } else {
            format!("{err}: {detail}\n")
        };
        if let Err(e) = std::fs::write(dir.join("failure.txt"), note) {
            return anyhow::Error::new(err).context(format!("also failed to write failure.txt: {e}"));
        }
    }
    err.into()
}

fn params_finite(model: &mut Model) -> bool {
    let mut ok = true;
    model.visit_params_mut(&mut |_, w| ok &= w.data().iter().all(|v| v.is_finite()));
    ok
}

fn decays(name: &str) -> bool {
    !(name.contains(".bn.") || name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2"))
}

/// SGD with momentum: `v ← μv + g + wd·w`, `w ← w − lr·v`.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let vel = &mut self.velocity;
        model.visit_params_mut(&mut |name, w| {
            let Some(g) = grads.get(name) else { return };
            let wd = if decays(name) { wd } else { 0.0 };
            let v = vel.entry(name.to_string()).or_insert_with(|| vec![0.0; w.numel()]);
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        });
    }
}

fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    if rows.is_empty() {
        w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains one model. When `out` is given, writes the metrics CSV after every
/// epoch, then the test summary, the final checkpoint and the resolved
/// config.
pub fn train(cfg: &RunConfig, splits: &Splits, out: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    let mut model = build_model(cfg, &splits.train)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    }
    let epochs = cfg.train.epochs;
    let mut metrics = Vec::with_capacity(epochs + 1);
    let (tl, ta) = evaluate(&mut model, &splits.train)?;
    let (vl, va) = evaluate(&mut model, &splits.val)?;
    metrics.push(EpochMetrics {
        epoch: 0,
        train_loss: tl,
        train_acc: ta,
        val_loss: vl,
        val_acc: va,
        lr: cfg.optim.lr_at(1, epochs),
    });
    let flush = |m: &[EpochMetrics]| -> Result<()> {
        if let Some(dir) = out {
            write_metrics(&dir.join(METRICS_FILE), m)?;
        }
        Ok(())
    };
    flush(&metrics)?;

    let mut opt = Sgd::new(cfg.optim.momentum, cfg.optim.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    for epoch in 1..=epochs {
        let lr = cfg.optim.lr_at(epoch, epochs);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for (step_no, batch) in order.chunks(cfg.train.batch_size).enumerate() {
            let s = match step(&mut model, &splits.train, batch, cfg.train.workers) {
                Err(e) if matches!(e.downcast_ref(), Some(dcd_core::Error::NonFinite { .. })) => {
                    let err = NonFiniteLoss {
                        epoch,
                        step: step_no,
                        what: "activations",
                    };
                    return Err(abort(out, err, &e.to_string()));
                }
                r => r?,
            };
            let what = if !s.loss.is_finite() {
                Some("loss")
            } else {
                opt.step(&mut model, &s.grads, lr);
                (!params_finite(&mut model)).then_some("parameters")
            };
            if let Some(what) = what {
                return Err(abort(
                    out,
                    NonFiniteLoss {
                        epoch,
                        step: step_no,
                        what,
                    },
                    "",
                ));
            }
            loss_sum += s.loss * batch.len() as f64;
            hits += s.hits;
        }
        let n = splits.train.len().max(1) as f64;
        let (vl, va) = evaluate(&mut model, &splits.val)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_acc: hits as f64 / n,
            val_loss: vl,
            val_acc: va,
            lr,
        });
        flush(&metrics)?;
    }
    let (test_loss, test_acc) = evaluate(&mut model, &splits.test)?;
    let test = TestMetrics {
        arm: arm_label(cfg),
        seed: cfg.seed,
        test_loss,
        test_acc,
    };
    if let Some(dir) = out {
        let mut w = csv::Writer::from_path(dir.join(TEST_FILE))?;
        w.serialize(&test)?;
        w.flush()?;
        checkpoint::write_file(&dir.join(CHECKPOINT_FILE), &model)?;
    }
    Ok(RunResult { metrics, test, model })
}

pub fn arm_label(cfg: &RunConfig) -> String {
    match cfg.model.arm.as_str() {
        "vanilla" => format!("vanilla_tau{}", cfg.model.temperature),
        a => a.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub arm: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: usize,
    pub mean_test_acc: f64,
    pub min_test_acc: f64,
    pub max_test_acc: f64,
}

#[derive(Debug)]
pub struct SweepResult {
    pub tests: Vec<TestMetrics>,
    pub curves: Vec<CurveRow>,
    pub summary: Vec<ArmSummary>,
}

impl SweepResult {
    pub fn mean_acc(&self, arm: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.arm == arm).map(|s| s.mean_test_acc)
    }
}

/// Runs every `(arm, seed)` pair of the config's sweep (or just the config
/// itself) on one shared dataset. Writes `<out>/<arm>/seed<k>/…` plus
/// `tests.csv`, `curves.csv` and `summary.csv` under `out`.
pub fn sweep(cfg: &RunConfig, out: Option<&Path>) -> Result<SweepResult> {
    let splits = task::load(&cfg.task)?;
    let (arms, seeds) = match &cfg.sweep {
        Some(s) => (s.arms.clone(), s.seeds.clone()),
        None => (vec![arm_label(cfg)], vec![cfg.seed]),
    };
    if arms.is_empty() || seeds.is_empty() {
        bail!("sweep needs at least one arm and one seed");
    }
    let mut tests = Vec::new();
    let mut curves = Vec::new();
    for arm in &arms {
        for &seed in &seeds {
            let mut c = cfg.with_arm(arm)?;
            c.seed = seed;
            c.sweep = None;
            let dir: Option<PathBuf> = out.map(|o| o.join(arm).join(format!("seed{seed}")));
            if let Some(d) = &dir {
                c.out = d.clone();
            }
            let r = train(&c, &splits, dir.as_deref())?;
            curves.extend(r.metrics.iter().map(|m| CurveRow {
                arm: arm.clone(),
                seed,
                epoch: m.epoch,
                train_loss: m.train_loss,
                train_acc: m.train_acc,
                val_loss: m.val_loss,
                val_acc: m.val_acc,
                lr: m.lr,
            }));
            let mut t = r.test;
            t.arm = arm.clone();
            tests.push(t);
        }
    }
    let summary = arms
        .iter()
        .map(|a| {
            let accs: Vec<f64> = tests.iter().filter(|t| &t.arm == a).map(|t| t.test_acc).collect();
            ArmSummary {
                arm: a.clone(),
                runs: accs.len(),
                mean_test_acc: accs.iter().sum::<f64>() / accs.len() as f64,
                min_test_acc: accs.iter().copied().fold(f64::INFINITY, f64::min),
                max_test_acc: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let res = SweepResult { tests, curves, summary };
    if let Some(o) = out {
        std::fs::create_dir_all(o)?;
        write_rows(&o.join("tests.csv"), &res.tests)?;
        write_rows(&o.join("curves.csv"), &res.curves)?;
        write_rows(&o.join("summary.csv"), &res.summary)?;
    }
    Ok(res)
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
