//! Variance of the dynamic fusion coefficients Φ across inputs.
//!
//! For each DCD layer: the population variance of every Φ entry over all
//! samples, averaged over the entries, divided by the population variance of
//! the layer's input feature map pooled over every sample, channel and
//! position.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use dcd_core::layers::{Dynamic, ForwardCtx};
use dcd_core::zoo::Model;
use dcd_core::Tape;
use serde::{Deserialize, Serialize};

use crate::task::Dataset;

pub const NORMALIZER: &str = "pooled";
const BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiRow {
    pub depth: usize,
    pub layer: String,
    pub entries: usize,
    pub samples: usize,
    pub raw_variance: f64,
    pub input_variance: f64,
    pub sigma_phi: f64,
    /// How the input variance is taken; always `pooled`.
    pub normalizer: String,
}

/// Streaming mean and sum of squared deviations.
#[derive(Clone, Debug, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2 / self.n as f64
        }
    }
}

struct LayerAcc {
    depth: usize,
    samples: usize,
    phi: Vec<Welford>,
    input: Welford,
}

pub fn analyze(model: &mut Model, data: &Dataset) -> Result<Vec<PhiRow>> {
    let dcd: Vec<(usize, String)> = model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.spec().dynamic, Dynamic::Dcd(_)))
        .map(|(i, l)| (i, l.name().to_string()))
        .collect();
    if dcd.is_empty() {
        bail!("model {} has no DCD layers", model.graph().name);
    }
    if data.is_empty() {
        bail!("no samples to analyze");
    }
    let mut acc: BTreeMap<String, LayerAcc> = dcd
        .iter()
        .map(|(d, n)| {
            let a = LayerAcc {
                depth: *d,
                samples: 0,
                phi: Vec::new(),
                input: Welford::default(),
            };
            (n.clone(), a)
        })
        .collect();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(BATCH) {
        let (x, _) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut ctx = ForwardCtx {
            train: false,
            phi: Some(Vec::new()),
            inputs: Some(Vec::new()),
        };
        model.forward(&mut tape, xv, &mut ctx)?;
        for (name, phi) in ctx.phi.take().unwrap_or_default() {
            let a = acc.get_mut(&name).expect("DCD layer");
            let k = phi.cols();
            if a.phi.is_empty() {
                a.phi = vec![Welford::default(); k];
            }
            for row in phi.data().chunks(k) {
                a.samples += 1;
                for (w, v) in a.phi.iter_mut().zip(row) {
                    w.push(*v);
                }
            }
        }
        for (name, input) in ctx.inputs.take().unwrap_or_default() {
            let a = acc.get_mut(&name).expect("DCD layer");
            for v in input.data() {
                a.input.push(*v);
            }
        }
    }
    let mut rows: Vec<PhiRow> = acc
        .into_iter()
        .map(|(layer, a)| {
            let raw = a.phi.iter().map(Welford::variance).sum::<f64>() / a.phi.len().max(1) as f64;
            let input_variance = a.input.variance();
            PhiRow {
                depth: a.depth,
                layer,
                entries: a.phi.len(),
                samples: a.samples,
                raw_variance: raw,
                input_variance,
                sigma_phi: if input_variance > 0.0 { raw / input_variance } else { f64::NAN },
                normalizer: NORMALIZER.into(),
            }
        })
        .collect();
    rows.sort_by_key(|r| r.depth);
    Ok(rows)
}
