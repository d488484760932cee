//! End-to-end acceptance suite. Prints one line per criterion and fails if
//! any criterion fails. Run with `cargo test -p dcd-harness --test acceptance`.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use dcd_core::accounting::{check_golden, dcd_complexity_formula, golden_rows, layer_params};
use dcd_core::layers::{default_latent_dim, Act, Category, ConvSpec, DcdConfig, DcdVariant, Dynamic};
use dcd_core::zoo::{build_mobilenetv2, build_resnet, build_task_net, Arm, Model, Placement};
use dcd_core::Tensor;
use dcd_harness::bench::static_twin;
use dcd_harness::certify;
use dcd_harness::checkpoint;
use dcd_harness::config::{RunConfig, SweepConfig};
use dcd_harness::task;
use dcd_harness::train::{self, CurveRow, CHECKPOINT_FILE, METRICS_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String)>;
type Criterion = (&'static str, fn() -> Check);

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn within(ok: bool, elapsed: Duration, budget: Duration) -> (bool, String) {
    let note = if elapsed <= budget {
        String::new()
    } else {
        format!(", over the {}s budget", budget.as_secs())
    };
    (ok && elapsed <= budget, note)
}

fn decomposition() -> Check {
    let t = Instant::now();
    let worst = certify::decomposition_sweep(100, &[4, 8, 16], &[2, 4], 1)?;
    let (ok, note) = within(worst < 1e-8, t.elapsed(), Duration::from_secs(10));
    Ok((ok, format!("100 instances, max |direct - decomposed| = {worst:.3e} (< 1e-8){note}")))
}

fn rank1() -> Check {
    let (kc, ll) = certify::rank1_sweep(50, 1)?;
    Ok((
        kc < 1e-9 && ll < 1e-9,
        format!("50 instances, KC-term sum {kc:.3e}, L2-term sum {ll:.3e} (< 1e-9)"),
    ))
}

fn gradients() -> Check {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    let mut n = 0;
    for sel in ["all", "tasknet_static", "tasknet_dcd", "tasknet_vanilla"] {
        for (name, rep) in certify::gradcheck(sel)? {
            n += 1;
            worst = worst.max(rep.max_rel_error());
            if !rep.passed || rep.tolerance > 1e-6 {
                failed.push(name);
            }
        }
    }
    let (ok, note) = within(failed.is_empty(), t.elapsed(), Duration::from_secs(300));
    Ok((
        ok,
        format!("{n} variants, max relative error {worst:.3e} (< 1e-6), failed {failed:?}{note}"),
    ))
}

fn formula() -> Check {
    let f = dcd_complexity_formula(64, 8, 16);
    let closed = 64 * 64 + 3 * 64 * 64 / 16 + 2 * 64 * 8;
    let s =
        ConvSpec::conv("l", 64, 64, 1, 1, Act::None).with_dynamic(Dynamic::Dcd(DcdConfig::new(DcdVariant::Pointwise { blocks: 1 }, 16)));
    let cats = layer_params(&s)?;
    // weights only: drop batch norm and the branch biases (hidden 4, output C + L²)
    let layer = cats.values().sum::<u64>() - cats[&Category::BatchNorm] - (4 + 64 + 64);
    let bad: Vec<usize> = (8..=1024usize)
        .filter(|&c| dcd_complexity_formula(c as u64, default_latent_dim(c) as u64, 16) >= 4 * (c * c) as u64)
        .collect();
    let ok = f == 5888 && closed == 5888 && layer == f && bad.is_empty();
    Ok((
        ok,
        format!("C=64 L=8 r=16 gives {f} (closed form {closed}, layer count {layer}); C in 8..=1024 at or above 4C^2: {bad:?}"),
    ))
}

fn golden() -> Check {
    let mut missed = Vec::new();
    let rows = golden_rows();
    for row in &rows {
        let r = check_golden(row)?;
        if !r.params_ok {
            missed.push(format!("{} params {} vs {:.4e}", r.id, r.params, r.params_target));
        }
        if !r.madds_ok {
            missed.push(format!("{} madds {} vs {:.4e}", r.id, r.madds, r.madds_target.unwrap_or(f64::NAN)));
        }
    }
    Ok((missed.is_empty(), format!("{} rows; misses: [{}]", rows.len(), missed.join("; "))))
}

fn init_equivalence() -> Check {
    let pw: BTreeSet<Placement> = [Placement::Pw, Placement::Cls].into();
    let graphs = vec![
        build_mobilenetv2(0.5, &pw, None)?,
        build_resnet(18, true, None)?,
        build_resnet(10, true, None)?,
        build_task_net(8, 12, 2, 16, Arm::Dcd { r: 2 })?,
    ];
    let mut mismatched = Vec::new();
    for g in &graphs {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(vec![2, g.in_channels, 32, 32], |_| r.gen_range(-1.0..1.0))?;
        let mut a = Model::new(g.clone(), 11)?;
        let mut b = Model::new(static_twin(g), 11)?;
        for train in [false, true] {
            if bits(&a.logits(&x, train)?) != bits(&b.logits(&x, train)?) {
                mismatched.push(format!("{} train={train}", g.name));
            }
        }
    }
    Ok((
        mismatched.is_empty(),
        format!(
            "{} models x train/eval bit-identical to their static twins; mismatched {mismatched:?}",
            graphs.len()
        ),
    ))
}

fn structural() -> Check {
    let rows = certify::structural_invariants(50, 1)?;
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({} violations)", r.check, r.violations))
        .collect();
    Ok((bad.is_empty(), format!("{} checks over 50 inputs each; failed {bad:?}", rows.len())))
}

fn config_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/context_gated.toml")
}

fn context_gated() -> Check {
    let t = Instant::now();
    let base = RunConfig::load(&config_path())?;
    let dir = tempfile::tempdir()?;
    let mut paired = base.clone();
    paired.sweep = Some(SweepConfig {
        arms: vec!["static".into(), "dcd".into()],
        seeds: vec![1, 2, 3],
    });
    let main = train::sweep(&paired, Some(&dir.path().join("paired")))?;
    let mut vanilla = base.clone();
    vanilla.sweep = Some(SweepConfig {
        arms: vec!["vanilla_tau1".into(), "vanilla_tau30".into()],
        seeds: vec![1],
    });
    let van = train::sweep(&vanilla, Some(&dir.path().join("vanilla")))?;

    let mut curves: Vec<CurveRow> = Vec::new();
    for sub in ["paired", "vanilla"] {
        let mut rd = csv::Reader::from_path(dir.path().join(sub).join("curves.csv"))?;
        for r in rd.deserialize() {
            curves.push(r?);
        }
    }
    let arms: BTreeSet<&str> = curves.iter().map(|c| c.arm.as_str()).collect();
    let per_run = base.train.epochs + 1;
    let complete = ["static", "dcd", "vanilla_tau1", "vanilla_tau30"].iter().all(|a| arms.contains(a)) && curves.len() == 8 * per_run;

    let s = main.mean_acc("static").context("static arm")?;
    let d = main.mean_acc("dcd").context("dcd arm")?;
    let v1 = van.mean_acc("vanilla_tau1").context("vanilla arm")?;
    let v30 = van.mean_acc("vanilla_tau30").context("vanilla arm")?;
    let (ok, note) = within(d - s >= 0.05 && complete, t.elapsed(), Duration::from_secs(900));
    Ok((
        ok,
        format!(
            "mean test acc static {s:.4}, dcd {d:.4} (margin {:+.4}, need >= 0.05); vanilla tau1 {v1:.4}, tau30 {v30:.4}; curves cover {} arms{note}",
            d - s,
            arms.len()
        ),
    ))
}

fn reproducibility() -> Check {
    let mut c = RunConfig::load(&config_path())?;
    c.sweep = None;
    c.train.epochs = 2;
    c.task.train = 128;
    c.task.val = 64;
    c.task.test = 64;
    let splits = task::load(&c.task)?;
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    let ra = train::train(&c, &splits, Some(a.path()))?;
    train::train(&c, &splits, Some(b.path()))?;
    let same_metrics = std::fs::read(a.path().join(METRICS_FILE))? == std::fs::read(b.path().join(METRICS_FILE))?;

    let mut back = train::build_model(&c, &splits.train)?;
    checkpoint::read_file(&a.path().join(CHECKPOINT_FILE), &mut back)?;
    let mut orig = ra.model;
    let mut same_params = true;
    let entries = back.state_entries();
    for ((na, ta), (nb, tb)) in orig.state_entries().iter().zip(&entries) {
        same_params &= na == nb && ta.shape() == tb.shape() && bits(ta) == bits(tb);
    }
    let (x, _) = splits.test.batch(&(0..8).collect::<Vec<_>>())?;
    let same_logits = bits(&orig.logits(&x, false)?) == bits(&back.logits(&x, false)?);
    ensure!(!entries.is_empty(), "empty checkpoint");
    Ok((
        same_metrics && same_params && same_logits,
        format!("checkpoint round trip params {same_params}, logits {same_logits}; repeated metrics.csv identical {same_metrics}"),
    ))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("decomposition equivalence", decomposition),
        ("rank-1 expansions", rank1),
        ("gradient certification", gradients),
        ("complexity formula", formula),
        ("budget table", golden),
        ("initial equivalence", init_equivalence),
        ("structural invariants", structural),
        ("context-gated task", context_gated),
        ("reproducibility", reproducibility),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = run().unwrap_or_else(|e| (false, format!("error: {e:#}")));
        let line = format!(
            "criterion {}: {} {name}: {detail} ({:.1}s)",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        // straight to stderr so the lines show even when output is captured
        let _ = writeln!(std::io::stderr(), "{line}");
        if !ok {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
