//! Batch-1 inference latency.

use std::time::Instant;

use anyhow::{bail, Result};
use dcd_core::layers::{Dynamic, Role};
use dcd_core::zoo::{Model, ModelGraph};
use dcd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub model: String,
    pub variant: String,
    pub resolution: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<LatencyRow>,
    /// Per-image milliseconds of the measured model, in run order.
    pub samples: Vec<f64>,
    /// Mean latency of the model over its all-static twin.
    pub overhead_ratio: f64,
}

/// The same graph with every convolution made static.
pub fn static_twin(g: &ModelGraph) -> ModelGraph {
    let mut s = g.clone();
    let roles = [
        Role::Stem,
        Role::Expand,
        Role::Depthwise,
        Role::Project,
        Role::Conv3x3,
        Role::Conv1x1,
        Role::Shortcut,
        Role::Classifier,
        Role::Other,
    ];
    s.set_dynamic(&roles, Dynamic::Static);
    s.name = format!("{}_static_twin", g.name);
    s
}

/// Linear-interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn time_model(graph: &ModelGraph, resolution: usize, repeats: usize, warmup: usize, seed: u64) -> Result<Vec<f64>> {
    let mut model = Model::new(graph.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = vec![1, graph.in_channels, resolution, resolution];
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(repeats);
    for i in 0..warmup + repeats {
        let x = Tensor::new(shape.clone(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let t = Instant::now();
        let y = model.logits(&x, false)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(y);
        if i >= warmup {
            out.push(ms);
        }
    }
    Ok(out)
}

fn summarize(model: &str, variant: &str, resolution: usize, warmup: usize, samples: &[f64]) -> LatencyRow {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    LatencyRow {
        model: model.into(),
        variant: variant.into(),
        resolution,
        repeats: samples.len(),
        warmup,
        mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
        median_ms: quantile(&s, 0.5),
        p95_ms: quantile(&s, 0.95),
    }
}

/// Times `graph` and its static twin with batch size 1.
pub fn bench(graph: &ModelGraph, resolution: usize, repeats: usize, warmup: usize, seed: u64) -> Result<BenchReport> {
    if repeats == 0 {
        bail!("repeats must be positive");
    }
    let twin = static_twin(graph);
    let samples = time_model(graph, resolution, repeats, warmup, seed)?;
    let base = time_model(&twin, resolution, repeats, warmup, seed)?;
    let a = summarize(&graph.name, "model", resolution, warmup, &samples);
    let b = summarize(&graph.name, "static_twin", resolution, warmup, &base);
    let overhead_ratio = a.mean_ms / b.mean_ms;
    Ok(BenchReport {
        rows: vec![a, b],
        samples,
        overhead_ratio,
    })
}
