//! Gradient certification and decomposition-identity suites.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use dcd_core::decomposition::{
    aggregate_decomposed, channel_fusion_rank1_expand, compare_aggregation_mechanisms, numerical_rank, rank1_expand, residual_decompose,
};
use dcd_core::gradcheck::{check_tape, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use dcd_core::layers::{
    dcd_weight_1x1, dcd_weight_kxk_channel_only, dcd_weight_sparse, vanilla_weight, Act, ConvLayer, ConvSpec, DcdConfig, DcdVariant,
    Dynamic, ForwardCtx, VanillaConfig,
};
use dcd_core::zoo::{build_task_net, Arm, Model, ModelGraph, Stage};
use dcd_core::{AttentionMode, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], scale: f64, r: &mut ChaCha8Rng) -> Result<Tensor> {
    Ok(Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-scale..scale))?)
}

/// Layer variants certified by `gradcheck all`, with their probe seeds.
pub const LAYER_VARIANTS: [&str; 8] = [
    "vanilla_softmax",
    "vanilla_sigmoid",
    "dcd_1x1",
    "dcd_sparse",
    "dcd_depthwise",
    "dcd_kxk_joint",
    "dcd_kxk_channel",
    "static",
];

fn dcd(c_in: usize, c_out: usize, k: usize, variant: DcdVariant, r: usize) -> ConvSpec {
    let mut s = if variant == DcdVariant::Depthwise {
        ConvSpec::depthwise("l", c_in, k, 1, Act::None)
    } else {
        ConvSpec::conv("l", c_in, c_out, k, 1, Act::None)
    };
    s.dynamic = Dynamic::Dcd(DcdConfig::new(variant, r));
    s
}

fn vanilla(c: usize, kernels: usize, mode: AttentionMode) -> ConvSpec {
    ConvSpec::conv("l", c, c, 1, 1, Act::None).with_dynamic(Dynamic::Vanilla(VanillaConfig {
        kernels,
        mode,
        temperature: 1.0,
        hidden: None,
    }))
}

/// Spec and seed for a named layer variant.
pub fn layer_variant(name: &str) -> Result<(ConvSpec, u64)> {
    Ok(match name {
        "vanilla_softmax" => (vanilla(8, 4, AttentionMode::Softmax), 1),
        "vanilla_sigmoid" => (vanilla(8, 4, AttentionMode::Sigmoid), 2),
        "dcd_1x1" => (dcd(8, 8, 1, DcdVariant::Pointwise { blocks: 1 }, 2), 3),
        "dcd_sparse" => (dcd(8, 8, 1, DcdVariant::Pointwise { blocks: 2 }, 2), 4),
        "dcd_depthwise" => (dcd(6, 6, 3, DcdVariant::Depthwise, 2), 5),
        "dcd_kxk_joint" => (dcd(16, 8, 3, DcdVariant::KxkJoint, 4), 6),
        "dcd_kxk_channel" => (dcd(8, 8, 3, DcdVariant::KxkChannel, 2), 27),
        "static" => (ConvSpec::conv("l", 4, 4, 3, 1, Act::None), 9),
        other => bail!("unknown gradcheck selector {other}"),
    })
}

/// A `visit_params_mut`-style walker over named tensors.
pub type ParamWalker<'a> = dyn FnMut(&mut dyn FnMut(&str, &mut Tensor)) + 'a;

/// Moves every learnable tensor to a random point so that no gradient is
/// structurally zero.
pub fn randomize(visit: &mut ParamWalker, seed: u64) {
    let mut r = rng(seed);
    visit(&mut |name, t| {
        let shape = t.shape().to_vec();
        let range = if name.ends_with("bn.gamma") { 0.5..1.5 } else { -0.5..0.5 };
        *t = Tensor::from_fn(shape, |_| r.gen_range(range.clone())).expect("finite");
    });
}

/// `Σ (y − y0) ⊙ c` for a fixed random `c`, centered on the base output.
fn centered_loss(tape: &mut Tape, y: Var, y0: &Tensor, weights: &Tensor) -> Result<Var> {
    let y0 = tape.constant(y0.clone());
    let d = tape.sub(y, y0)?;
    let c = tape.constant(weights.clone());
    let m = tape.mul(d, c)?;
    Ok(tape.sum(m)?)
}

/// Finite-difference check of one layer in training mode on a `2×C×4×4`
/// input, covering every parameter and the input.
pub fn gradcheck_layer(spec: ConvSpec, seed: u64) -> Result<GradCheckReport> {
    let mut layer = ConvLayer::new(spec.clone(), 7)?;
    randomize(&mut |f| layer.visit_params_mut(f), seed);
    let mut params = BTreeMap::new();
    layer.visit_params(&mut |n, t| {
        params.insert(n.to_string(), t.clone());
    });
    let mut r = rng(seed + 1);
    params.insert("input".into(), rand_tensor(&[2, spec.c_in, 4, 4], 1.0, &mut r)?);
    let weights = rand_tensor(&[2, spec.c_out, 4, 4], 1.0, &mut r)?;
    let run = |tape: &mut Tape, p: &BTreeMap<String, Tensor>, as_param: bool| -> Result<Var> {
        let mut l = layer.clone();
        l.load_params(p)?;
        let x = if as_param {
            tape.param("input", &p["input"])?
        } else {
            tape.constant(p["input"].clone())
        };
        Ok(l.forward(tape, x, &mut ForwardCtx::train())?)
    };
    let mut t0 = Tape::new();
    let y = run(&mut t0, &params, false)?;
    let y0 = t0.value(y).clone();
    Ok(check_tape(
        |tape, p| {
            let y = run(tape, p, true).map_err(|e| dcd_core::Error::InvalidArgument(e.to_string()))?;
            centered_loss(tape, y, &y0, &weights).map_err(|e| dcd_core::Error::InvalidArgument(e.to_string()))
        },
        &params,
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
    )?)
}

/// The small task network with identity activations, so that no ReLU kink
/// falls inside a finite-difference step.
pub fn gradcheck_model_graph(arm: Arm) -> Result<ModelGraph> {
    let mut g = build_task_net(3, 4, 2, 4, arm)?;
    for s in &mut g.stages {
        if let Stage::Conv(c) = s {
            c.act = Act::None;
        }
    }
    Ok(g)
}

pub fn gradcheck_model(graph: ModelGraph, seed: u64) -> Result<GradCheckReport> {
    let mut model = Model::new(graph.clone(), 7)?;
    randomize(&mut |f| model.visit_params_mut(f), seed);
    let mut params = BTreeMap::new();
    model.visit_params(&mut |n, t| {
        params.insert(n.to_string(), t.clone());
    });
    let mut r = rng(seed + 1);
    let res = graph.resolution;
    params.insert("input".into(), rand_tensor(&[2, graph.in_channels, res, res], 1.0, &mut r)?);
    let weights = rand_tensor(&[2, graph.classes], 1.0, &mut r)?;
    let run = |tape: &mut Tape, p: &BTreeMap<String, Tensor>, as_param: bool| -> dcd_core::Result<Var> {
        let mut m = model.clone();
        m.load_state(&merge_state(&m, p))?;
        let x = if as_param {
            tape.param("input", &p["input"])?
        } else {
            tape.constant(p["input"].clone())
        };
        m.forward(tape, x, &mut ForwardCtx::train())
    };
    let mut t0 = Tape::new();
    let y = run(&mut t0, &params, false)?;
    let y0 = t0.value(y).clone();
    Ok(check_tape(
        |tape, p| {
            let y = run(tape, p, true)?;
            centered_loss(tape, y, &y0, &weights).map_err(|e| dcd_core::Error::InvalidArgument(e.to_string()))
        },
        &params,
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
    )?)
}

fn merge_state(m: &Model, p: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    let mut s: BTreeMap<String, Tensor> = m.state_entries().into_iter().collect();
    for (k, v) in p {
        if s.contains_key(k) {
            s.insert(k.clone(), v.clone());
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub variant: String,
    pub tensor: String,
    pub probes: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

pub fn grad_rows(variant: &str, report: &GradCheckReport) -> Vec<GradRow> {
    report
        .params
        .iter()
        .map(|p| GradRow {
            variant: variant.into(),
            tensor: p.name.clone(),
            probes: p.probed.len(),
            max_rel_error: p.max_rel_error,
            worst_index: p.worst_index,
            analytic: p.analytic_at_worst,
            numeric: p.numeric_at_worst,
            passed: p.max_rel_error < report.tolerance,
        })
        .collect()
}

/// Resolves a gradcheck selector: `all`, a layer variant, or
/// `tasknet_static` / `tasknet_dcd` / `tasknet_vanilla`.
pub fn gradcheck(selector: &str) -> Result<Vec<(String, GradCheckReport)>> {
    let names: Vec<&str> = if selector == "all" {
        LAYER_VARIANTS.to_vec()
    } else {
        vec![selector]
    };
    let mut out = Vec::new();
    for name in names {
        let report = match name {
            "tasknet_static" => gradcheck_model(gradcheck_model_graph(Arm::Static)?, 31)?,
            "tasknet_dcd" => gradcheck_model(gradcheck_model_graph(Arm::Dcd { r: 2 })?, 32)?,
            "tasknet_vanilla" => gradcheck_model(
                gradcheck_model_graph(Arm::Vanilla {
                    kernels: 3,
                    temperature: 1.0,
                })?,
                33,
            )?,
            _ => {
                let (spec, seed) = layer_variant(name)?;
                gradcheck_layer(spec, seed)?
            }
        };
        out.push((name.to_string(), report));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub suite: String,
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn row(suite: &str, trials: usize, max_deviation: f64, tolerance: f64) -> EquivalenceRow {
    EquivalenceRow {
        suite: suite.into(),
        trials,
        max_deviation,
        tolerance,
        passed: max_deviation < tolerance,
    }
}

fn vanilla_layer(c: usize, k: usize, seed: u64) -> Result<ConvLayer> {
    let spec = ConvSpec::conv("v", c, c, 1, 1, Act::None).with_dynamic(Dynamic::Vanilla(VanillaConfig {
        kernels: k,
        mode: AttentionMode::Softmax,
        temperature: 1.0,
        hidden: None,
    }));
    let mut layer = ConvLayer::new(spec, seed)?;
    randomize(&mut |f| layer.visit_params_mut(f), seed);
    Ok(layer)
}

fn kernels_of(layer: &ConvLayer, c: usize) -> Result<Vec<Tensor>> {
    let flat = layer.param("kernels").expect("vanilla layer");
    flat.data()
        .chunks(c * c)
        .map(|w| Ok(Tensor::new(vec![c, c], w.to_vec())?))
        .collect()
}

/// Max deviation between the vanilla layer's direct aggregation and the
/// decomposed form over `trials` random instances cycling through `dims`
/// and `ks`.
pub fn decomposition_sweep(trials: usize, dims: &[usize], ks: &[usize], seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let c = dims[t % dims.len()];
        let k = ks[(t / dims.len()) % ks.len()];
        let s = seed + t as u64;
        let layer = vanilla_layer(c, k, s)?;
        let pooled = rand_tensor(&[3, c], 2.0, &mut rng(s + 1000))?;
        let direct = vanilla_weight(&pooled, &layer)?;
        let d = residual_decompose(&kernels_of(&layer, c)?)?;
        let att = layer.attention_scores(&pooled)?;
        let via = aggregate_decomposed(&att, &d)?;
        worst = worst.max(direct.max_abs_diff(&via)?);
    }
    Ok(worst)
}

/// Deviation for uniform attention (the mean kernel) and for each one-hot
/// attention (the selected kernel).
pub fn trivial_cases(c: usize, k: usize, seed: u64) -> Result<(f64, f64)> {
    let mut r = rng(seed);
    let ks: Vec<Tensor> = (0..k).map(|_| rand_tensor(&[c, c], 1.0, &mut r)).collect::<Result<_>>()?;
    let d = residual_decompose(&ks)?;
    let u = aggregate_decomposed(&Tensor::full(vec![1, k], 1.0 / k as f64), &d)?;
    let uniform = u.reshape(vec![c, c])?.max_abs_diff(&d.w0)?;
    let mut onehot: f64 = 0.0;
    for i in 0..k {
        let mut a = Tensor::zeros(vec![1, k]);
        a.set(&[0, i], 1.0);
        let w = aggregate_decomposed(&a, &d)?.reshape(vec![c, c])?;
        onehot = onehot.max(w.max_abs_diff(&ks[i])?);
    }
    Ok((uniform, onehot))
}

/// Max deviation of the `KC`-term and `L²`-term rank-1 sums from their
/// product forms over `trials` instances each.
pub fn rank1_sweep(trials: usize, seed: u64) -> Result<(f64, f64)> {
    let (mut kc, mut ll): (f64, f64) = (0.0, 0.0);
    for t in 0..trials as u64 {
        let mut r = rng(seed + t);
        let (c, k) = (3 + (t % 5) as usize, 2 + (t % 3) as usize);
        let ks: Vec<Tensor> = (0..k).map(|_| rand_tensor(&[c, c], 1.0, &mut r)).collect::<Result<_>>()?;
        let d = residual_decompose(&ks)?;
        let att = rand_tensor(&[1, k], 2.0, &mut r)?.softmax_rows(1.0)?;
        let terms = rank1_expand(att.data(), &d)?;
        let full = aggregate_decomposed(&att, &d)?.reshape(vec![c, c])?.sub(&d.w0)?;
        kc = kc.max(terms.max_abs_diff(&full)?);

        let (c, l) = (4 + (t % 6) as usize, 1 + (t % 4) as usize);
        let p = rand_tensor(&[c, l], 1.0, &mut r)?;
        let q = rand_tensor(&[c, l], 1.0, &mut r)?;
        let phi = rand_tensor(&[l, l], 1.0, &mut r)?;
        let terms = channel_fusion_rank1_expand(&p, &phi, &q)?;
        let prod = p.matmul(&phi)?.matmul(&q.transpose()?)?;
        ll = ll.max(terms.max_abs_diff(&prod)?);
    }
    Ok((kc, ll))
}

/// Runs every identity suite. `dims` are the channel counts of the random
/// sweep; kernel counts are 2 and 4.
pub fn equivalence(trials: usize, dims: &[usize], seed: u64) -> Result<Vec<EquivalenceRow>> {
    if dims.is_empty() || dims.contains(&0) {
        bail!("dims must be non-empty and positive");
    }
    let c0 = dims[0];
    let (uniform, onehot) = trivial_cases(c0, 4, seed)?;
    let sweep = decomposition_sweep(trials, dims, &[2, 4], seed)?;
    let (kc, ll) = rank1_sweep(trials.clamp(1, 50), seed)?;
    let mut rows = vec![
        row("uniform_attention_mean_kernel", 1, uniform, 1e-9),
        row("one_hot_attention_selects_kernel", 4, onehot, 1e-9),
        row("direct_vs_decomposed", trials, sweep, 1e-8),
        row("rank1_kc_terms", trials.clamp(1, 50), kc, 1e-9),
        row("rank1_l2_terms", trials.clamp(1, 50), ll, 1e-9),
    ];
    let l = (c0 as f64).sqrt().floor().max(1.0) as usize;
    let mech = compare_aggregation_mechanisms(c0, 4, l, 5, seed)?;
    let rank_ok = mech.iter().all(|m| m.rank <= m.rank_bound);
    rows.push(EquivalenceRow {
        suite: "mechanism_rank_bounds".into(),
        trials: 5,
        max_deviation: 0.0,
        tolerance: 0.0,
        passed: rank_ok,
    });
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralRow {
    pub check: String,
    pub instances: usize,
    pub violations: usize,
    pub passed: bool,
}

/// A randomized DCD layer whose static kernel is zeroed, so generated
/// weights are the dynamic residual alone.
fn residual_layer(spec: ConvSpec, seed: u64) -> Result<ConvLayer> {
    let mut layer = ConvLayer::new(spec, seed)?;
    randomize(&mut |f| layer.visit_params_mut(f), seed);
    let w0 = layer.param_mut("w0").expect("dcd layer");
    *w0 = Tensor::zeros(w0.shape().to_vec());
    Ok(layer)
}

/// Sparse block pattern for B ∈ {2, 4, 8}, center-tap confinement of the
/// channel-only k×k residual, and rank ≤ L of the 1×1 residual over
/// `inputs` random inputs.
pub fn structural_invariants(inputs: usize, seed: u64) -> Result<Vec<StructuralRow>> {
    let mut rows = Vec::new();
    let c = 8;
    for blocks in [2, 4, 8] {
        let layer = residual_layer(dcd(c, c, 1, DcdVariant::Pointwise { blocks }, 2), seed + blocks as u64)?;
        let x = rand_tensor(&[inputs, c], 1.0, &mut rng(seed + 10 + blocks as u64))?;
        let w = dcd_weight_sparse(&x, &layer)?;
        let bs = c / blocks;
        let mut bad = 0;
        for n in 0..inputs {
            for i in 0..c {
                for j in 0..c {
                    let v = w.data()[n * c * c + i * c + j];
                    if (i / bs != j / bs) != (v == 0.0) {
                        bad += 1;
                    }
                }
            }
        }
        rows.push(StructuralRow {
            check: format!("sparse_zero_pattern_b{blocks}"),
            instances: inputs,
            violations: bad,
            passed: bad == 0,
        });
    }

    let k = 3;
    let layer = residual_layer(dcd(c, c, k, DcdVariant::KxkChannel, 2), seed + 20)?;
    let x = rand_tensor(&[inputs, c], 1.0, &mut rng(seed + 21))?;
    let w = dcd_weight_kxk_channel_only(&x, &layer)?;
    let center = k * k / 2;
    let mut bad = 0;
    for (i, v) in w.data().iter().enumerate() {
        if (i % (k * k) == center) == (*v == 0.0) {
            bad += 1;
        }
    }
    rows.push(StructuralRow {
        check: "channel_only_center_slice".into(),
        instances: inputs,
        violations: bad,
        passed: bad == 0,
    });

    let c = 16;
    let layer = residual_layer(dcd(c, c, 1, DcdVariant::Pointwise { blocks: 1 }, 4), seed + 30)?;
    let l = layer.spec().latent()?.map(|d| d.l).unwrap_or(0);
    let x = rand_tensor(&[inputs, c], 1.0, &mut rng(seed + 31))?;
    let w = dcd_weight_1x1(&x, &layer)?;
    let mut bad = 0;
    for n in 0..inputs {
        let res = Tensor::new(vec![c, c], w.data()[n * c * c..(n + 1) * c * c].to_vec())?;
        if numerical_rank(&res)? > l {
            bad += 1;
        }
    }
    rows.push(StructuralRow {
        check: format!("pointwise_residual_rank_le_{l}"),
        instances: inputs,
        violations: bad,
        passed: bad == 0 && l > 0,
    });
    Ok(rows)
}
