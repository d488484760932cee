//! Central-difference gradient oracle.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const MAX_PROBES_PER_TENSOR: usize = 256;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Flat indices probed for a tensor of `numel` entries: every entry when there
/// are at most 256, otherwise a fixed stride from index 0.
pub fn probe_indices(numel: usize) -> Vec<usize> {
    if numel <= MAX_PROBES_PER_TENSOR {
        return (0..numel).collect();
    }
    let stride = numel.div_ceil(MAX_PROBES_PER_TENSOR);
    (0..numel).step_by(stride).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index where the maximum occurred.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub probed: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares `analytic` against central differences of `f` around `params`.
pub fn finite_diff_check<F>(
    f: F,
    params: &BTreeMap<String, Tensor>,
    analytic: &BTreeMap<String, Tensor>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for (name, value) in params {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no analytic gradient for {name}")))?;
        if grad.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "finite_diff_check",
                left: grad.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        let probed = probe_indices(value.numel());
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            probed: probed.clone(),
        };
        for &i in &probed {
            let orig = value.data()[i];
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig + step;
            let plus = eval_finite(&f, &probe, name, i)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig - step;
            let minus = eval_finite(&f, &probe, name, i)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let e = relative_error(a, numeric);
            if e > check.max_rel_error || i == probed[0] {
                check.max_rel_error = e;
                check.worst_index = i;
                check.analytic_at_worst = a;
                check.numeric_at_worst = numeric;
            }
        }
        out.push(check);
    }
    let passed = out.iter().all(|p| p.max_rel_error < tolerance);
    Ok(GradCheckReport {
        params: out,
        step,
        tolerance,
        passed,
    })
}

fn eval_finite<F>(f: &F, params: &BTreeMap<String, Tensor>, name: &str, index: usize) -> Result<f64>
where
    F: Fn(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    let v = f(params)?;
    if !v.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite objective probing {name}[{index}]")));
    }
    Ok(v)
}

/// Gradient check of a scalar graph built on a tape. `build` must register
/// every entry of `params` as a named leaf and return the scalar loss.
pub fn check_tape<B>(build: B, params: &BTreeMap<String, Tensor>, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape, &BTreeMap<String, Tensor>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let grads = tape.backward(loss, 1.0)?.into_map();
    finite_diff_check(
        |p| {
            let mut t = Tape::new();
            let l = build(&mut t, p)?;
            t.value(l).item()
        },
        params,
        &grads,
        step,
        tolerance,
    )
}
