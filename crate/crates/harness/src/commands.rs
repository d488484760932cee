//! Subcommand bodies. Each writes its CSV reports under `out` and returns
//! whether every internal check passed.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dcd_core::accounting::{check_golden, count, golden_graph, golden_rows, GoldenResult};
use dcd_core::zoo::{build_mobilenetv2, build_resnet, build_task_net, Arm, Model, ModelGraph, Placement};
use serde::Serialize;

use crate::bench;
use crate::certify;
use crate::checkpoint;
use crate::config::{RunConfig, TaskKind};
use crate::phi;
use crate::task;
use crate::train::{self, write_rows};

/// Resolves a model selector:
///
/// * a golden-table id such as `mobilenetv2_x0.5_dcd_pw_cls` or `resnet18_dcd`;
/// * `mobilenetv2_x<width>` optionally followed by `_dcd_` and placements
///   joined by `_` (`pw`, `dw`, `cls`);
/// * `resnet<depth>` optionally followed by `_dcd`;
/// * `tasknet_static`, `tasknet_dcd`, `tasknet_vanilla`;
/// * `config`, the model of the loaded run config.
pub fn resolve_model(selector: &str, cfg: Option<&RunConfig>) -> Result<ModelGraph> {
    if let Ok(g) = golden_graph(selector) {
        return Ok(g);
    }
    if selector == "config" {
        let cfg = cfg.context("selector `config` needs --config")?;
        let (c, s, k) = task_dims(cfg)?;
        return cfg.graph(c, s, k);
    }
    if let Some(rest) = selector.strip_prefix("mobilenetv2_x") {
        let (w, placements) = match rest.split_once("_dcd_") {
            Some((w, p)) => (w, p.split('_').map(parse_placement).collect::<Result<BTreeSet<_>>>()?),
            None => (rest, BTreeSet::new()),
        };
        let w: f64 = w.parse().with_context(|| format!("bad width in {selector}"))?;
        return Ok(build_mobilenetv2(w, &placements, None)?);
    }
    if let Some(rest) = selector.strip_prefix("resnet") {
        let (d, dcd) = match rest.strip_suffix("_dcd") {
            Some(d) => (d, true),
            None => (rest, false),
        };
        let d: usize = d.parse().with_context(|| format!("bad depth in {selector}"))?;
        return Ok(build_resnet(d, dcd, None)?);
    }
    let arm = match selector {
        "tasknet_static" => Arm::Static,
        "tasknet_dcd" => Arm::Dcd { r: 4 },
        "tasknet_vanilla" => Arm::Vanilla {
            kernels: 4,
            temperature: 1.0,
        },
        other => bail!("unknown model selector {other}"),
    };
    Ok(build_task_net(8, 16, 2, 16, arm)?)
}

fn parse_placement(s: &str) -> Result<Placement> {
    Ok(match s {
        "pw" => Placement::Pw,
        "dw" => Placement::Dw,
        "cls" => Placement::Cls,
        other => bail!("unknown placement {other}"),
    })
}

/// Input channels, resolution and class count of the configured task.
pub fn task_dims(cfg: &RunConfig) -> Result<(usize, usize, usize)> {
    Ok(match cfg.task.kind {
        TaskKind::ContextGated | TaskKind::Linear => (cfg.task.channels, cfg.task.size, 2),
        TaskKind::Images => {
            let d = task::load_image_folder(cfg.task.dir.as_deref().context("images task needs task.dir")?)?;
            (d.channels, d.size, d.classes)
        }
    })
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let res = train::sweep(cfg, Some(out))?;
    for s in &res.summary {
        println!("{:<16} runs {}  mean test acc {:.4}", s.arm, s.runs, s.mean_test_acc);
    }
    Ok(true)
}

pub fn gradcheck(selector: &str, out: &Path) -> Result<bool> {
    std::fs::create_dir_all(out)?;
    let mut all = true;
    let mut summary = Vec::new();
    for (name, report) in certify::gradcheck(selector)? {
        write_rows(&out.join(format!("gradcheck_{name}.csv")), &certify::grad_rows(&name, &report))?;
        println!(
            "{:<18} {}  max rel err {:.3e}",
            name,
            if report.passed { "pass" } else { "FAIL" },
            report.max_rel_error()
        );
        all &= report.passed;
        summary.push(GradSummary {
            variant: name,
            tensors: report.params.len(),
            max_rel_error: report.max_rel_error(),
            tolerance: report.tolerance,
            passed: report.passed,
        });
    }
    write_rows(&out.join("gradcheck_summary.csv"), &summary)?;
    Ok(all)
}

#[derive(Serialize)]
struct GradSummary {
    variant: String,
    tensors: usize,
    max_rel_error: f64,
    tolerance: f64,
    passed: bool,
}

pub fn equivalence(trials: usize, dims: &[usize], seed: u64, out: &Path) -> Result<bool> {
    std::fs::create_dir_all(out)?;
    let rows = certify::equivalence(trials, dims, seed)?;
    write_rows(&out.join("equivalence.csv"), &rows)?;
    for r in &rows {
        println!(
            "{:<34} {}  max dev {:.3e}",
            r.suite,
            if r.passed { "pass" } else { "FAIL" },
            r.max_deviation
        );
    }
    Ok(rows.iter().all(|r| r.passed))
}

#[derive(Serialize)]
struct CountRow<'a> {
    layer: &'a str,
    kind: &'a str,
    params: u64,
    madds: u64,
}

#[derive(Serialize)]
struct CountTotal<'a> {
    model: &'a str,
    resolution: usize,
    total_params: u64,
    backbone_params: u64,
    total_madds: u64,
}

/// Writes `count_<label>.csv` (per layer) and `count_<label>_total.csv`.
pub fn count_model(graph: &ModelGraph, label: &str, resolution: usize, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let rep = count(graph, resolution)?;
    let rows: Vec<CountRow> = rep
        .rows
        .iter()
        .map(|r| CountRow {
            layer: &r.layer,
            kind: &r.kind,
            params: r.params,
            madds: r.madds,
        })
        .collect();
    write_rows(&out.join(format!("count_{label}.csv")), &rows)?;
    let total = CountTotal {
        model: label,
        resolution,
        total_params: rep.total_params,
        backbone_params: rep.backbone_params(),
        total_madds: rep.total_madds,
    };
    write_rows(&out.join(format!("count_{label}_total.csv")), &[total])?;
    println!(
        "{}  params {}  backbone {}  madds@{} {}",
        label,
        rep.total_params,
        rep.backbone_params(),
        resolution,
        rep.total_madds
    );
    Ok(())
}

#[derive(Serialize)]
struct GoldenCsv {
    id: String,
    params: u64,
    params_target: f64,
    params_ok: bool,
    madds: u64,
    madds_target: Option<f64>,
    madds_ok: bool,
}

/// Compares every golden row; fails if any row misses its tolerance.
pub fn golden(out: &Path) -> Result<(bool, Vec<GoldenResult>)> {
    std::fs::create_dir_all(out)?;
    let results: Vec<GoldenResult> = golden_rows().iter().map(check_golden).collect::<dcd_core::Result<_>>()?;
    let rows: Vec<GoldenCsv> = results
        .iter()
        .map(|r| GoldenCsv {
            id: r.id.into(),
            params: r.params,
            params_target: r.params_target,
            params_ok: r.params_ok,
            madds: r.madds,
            madds_target: r.madds_target,
            madds_ok: r.madds_ok,
        })
        .collect();
    write_rows(&out.join("golden.csv"), &rows)?;
    for r in &results {
        println!(
            "{:<30} {}  params {} (target {:.3e})  madds {}{}",
            r.id,
            if r.passed() { "pass" } else { "FAIL" },
            r.params,
            r.params_target,
            r.madds,
            r.madds_target.map(|t| format!(" (target {t:.4e})")).unwrap_or_default()
        );
    }
    Ok((results.iter().all(GoldenResult::passed), results))
}

/// σ_Φ report for a trained checkpoint over the configured task's test split.
pub fn analyze_phi(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<Vec<phi::PhiRow>> {
    let splits = task::load(&cfg.task)?;
    let g = cfg.graph(splits.test.channels, splits.test.size, splits.test.classes)?;
    let mut model = Model::new(g, cfg.seed)?;
    checkpoint::read_file(ckpt, &mut model)?;
    let rows = phi::analyze(&mut model, &splits.test)?;
    std::fs::create_dir_all(out)?;
    write_rows(&out.join("phi.csv"), &rows)?;
    for r in &rows {
        println!("{:>3} {:<24} sigma_phi {:.6e}", r.depth, r.layer, r.sigma_phi);
    }
    Ok(rows)
}

pub fn bench(graph: &ModelGraph, resolution: usize, repeats: usize, warmup: usize, seed: u64, out: &Path) -> Result<bench::BenchReport> {
    std::fs::create_dir_all(out)?;
    let rep = bench::bench(graph, resolution, repeats, warmup, seed)?;
    write_rows(&out.join("bench.csv"), &rep.rows)?;
    #[derive(Serialize)]
    struct Sample {
        run: usize,
        ms: f64,
    }
    let samples: Vec<Sample> = rep.samples.iter().enumerate().map(|(run, ms)| Sample { run, ms: *ms }).collect();
    write_rows(&out.join("bench_samples.csv"), &samples)?;
    for r in &rep.rows {
        println!(
            "{:<12} mean {:.3} ms  median {:.3} ms  p95 {:.3} ms",
            r.variant, r.mean_ms, r.median_ms, r.p95_ms
        );
    }
    println!("overhead ratio {:.3}", rep.overhead_ratio);
    Ok(rep)
}
