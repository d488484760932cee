//! Parameter and multiply-add counts for layers and whole graphs.
//!
//! One multiply-accumulate is one MAdd; batch norm, activations, residual
//! additions and the static pooling stages cost nothing. Dynamic layers add
//! their own input pooling, the branch FC layers and the per-sample kernel
//! assembly.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::Result;
use crate::layers::{Category, ConvSpec, DcdVariant, Dynamic, Role};
use crate::zoo::{build_mobilenetv2, build_resnet, ModelGraph, Placement};

/// `C² + 2CL + (2C + L²)·⌊C/r⌋`: static kernel, `P` and `Q`, and both branch
/// FC layers of a square 1×1 DCD layer, biases excluded.
pub fn dcd_complexity_formula(c: u64, l: u64, r: u64) -> u64 {
    let h = c / r.max(1);
    c * c + 2 * c * l + (2 * c + l * l) * h
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCount {
    pub layer: String,
    pub kind: String,
    pub params: u64,
    pub madds: u64,
    pub categories: BTreeMap<Category, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountReport {
    pub model: String,
    pub resolution: usize,
    pub rows: Vec<LayerCount>,
    pub total_params: u64,
    pub total_madds: u64,
    pub by_category: BTreeMap<Category, u64>,
}

impl CountReport {
    pub fn category(&self, c: Category) -> u64 {
        self.by_category.get(&c).copied().unwrap_or(0)
    }

    /// Parameters outside the classifier.
    pub fn backbone_params(&self) -> u64 {
        self.total_params - self.category(Category::Classifier)
    }
}

fn kind(spec: &ConvSpec) -> String {
    match &spec.dynamic {
        Dynamic::Static if spec.is_depthwise() => "depthwise".into(),
        Dynamic::Static if spec.role == Role::Classifier => "classifier".into(),
        Dynamic::Static if spec.k == 1 => "pointwise".into(),
        Dynamic::Static => "static_conv".into(),
        Dynamic::Vanilla(v) => format!("vanilla_dyn_k{}", v.kernels),
        Dynamic::Dcd(c) => match c.variant {
            DcdVariant::Pointwise { blocks: 1 } => "dcd_1x1".into(),
            DcdVariant::Pointwise { blocks } => format!("dcd_sparse_b{blocks}"),
            DcdVariant::Depthwise => "dcd_depthwise".into(),
            DcdVariant::KxkJoint => "dcd_kxk_joint".into(),
            DcdVariant::KxkChannel => "dcd_kxk_channel".into(),
        },
    }
}

/// Learnable scalars of one layer, split by budget category.
pub fn layer_params(spec: &ConvSpec) -> Result<BTreeMap<Category, u64>> {
    spec.validate()?;
    let (ci, co, kk) = (spec.c_in as u64, spec.c_out as u64, (spec.k * spec.k) as u64);
    let g = spec.groups as u64;
    let mut m: BTreeMap<Category, u64> = BTreeMap::new();
    let mut add = |c: Category, n: u64| *m.entry(c).or_default() += n;
    let kernel = co * (ci / g) * kk;
    match &spec.dynamic {
        Dynamic::Static => add(Category::StaticKernel, kernel),
        Dynamic::Vanilla(v) => {
            let k = v.kernels as u64;
            add(Category::StaticKernel, k * kernel);
            add(
                Category::DynamicBranch,
                match v.hidden {
                    None => ci * k + k,
                    Some(h) => {
                        let h = h as u64;
                        ci * h + h + h * k + k
                    }
                },
            );
        }
        Dynamic::Dcd(cfg) => {
            let d = spec.latent()?.expect("dcd");
            let (l, lk) = (d.l as u64, d.l_k as u64);
            let lam = if cfg.lambda { co } else { 0 };
            let (proj, phi) = match cfg.variant {
                DcdVariant::Pointwise { blocks } => ((co + ci) * l, blocks as u64 * l * l),
                DcdVariant::Depthwise => (co * lk + kk * lk, lk * lk),
                DcdVariant::KxkJoint => ((co + ci) * l + kk * lk, l * l * lk),
                DcdVariant::KxkChannel => ((co + ci) * l, l * l),
            };
            let h = ci / cfg.r as u64;
            let dout = lam + phi;
            add(Category::StaticKernel, kernel);
            add(Category::Projections, proj);
            add(Category::DynamicBranch, ci * h + h + h * dout + dout);
        }
    }
    if spec.bias {
        add(Category::StaticKernel, co);
    }
    if spec.bn {
        add(Category::BatchNorm, 2 * co);
    }
    if spec.role == Role::Classifier {
        let total = m.values().sum();
        m.clear();
        m.insert(Category::Classifier, total);
    }
    Ok(m)
}

/// Multiply-adds of one layer for a `C_in×H×W` input producing `H'×W'`.
pub fn layer_madds(spec: &ConvSpec, input_hw: (usize, usize), output_hw: (usize, usize)) -> Result<u64> {
    spec.validate()?;
    let (ci, co, kk) = (spec.c_in as u64, spec.c_out as u64, (spec.k * spec.k) as u64);
    let g = spec.groups as u64;
    let kernel = co * (ci / g) * kk;
    let conv = kernel * (output_hw.0 * output_hw.1) as u64;
    let pool = ci * (input_hw.0 * input_hw.1) as u64;
    Ok(match &spec.dynamic {
        Dynamic::Static => conv,
        Dynamic::Vanilla(v) => {
            let k = v.kernels as u64;
            let att = match v.hidden {
                None => ci * k,
                Some(h) => ci * h as u64 + h as u64 * k,
            };
            conv + pool + att + k * kernel
        }
        Dynamic::Dcd(cfg) => {
            let d = spec.latent()?.expect("dcd");
            let (l, lk) = (d.l as u64, d.l_k as u64);
            let lam = if cfg.lambda { co } else { 0 };
            let h = ci / cfg.r as u64;
            let (phi, assemble) = match cfg.variant {
                DcdVariant::Pointwise { blocks } => {
                    let b = blocks as u64;
                    let (bi, bo) = (ci / b, co / b);
                    // Φ_b·Q_bᵀ, then P_b·(·), per block
                    (b * l * l, b * (l * l * bi + bo * l * bi))
                }
                DcdVariant::KxkChannel => (l * l, l * l * ci + co * l * ci),
                DcdVariant::Depthwise => (lk * lk, lk * lk * kk + co * lk * kk),
                DcdVariant::KxkJoint => (l * l * lk, co * l * l * lk + co * ci * l * lk + co * ci * kk * lk),
            };
            let scale = if cfg.lambda { kernel } else { 0 };
            conv + pool + ci * h + h * (lam + phi) + scale + assemble
        }
    })
}

pub fn count(model: &ModelGraph, resolution: usize) -> Result<CountReport> {
    let traced = model.trace(resolution)?;
    let mut rows = Vec::with_capacity(traced.len());
    let mut by_category = BTreeMap::new();
    for t in traced {
        let cats = layer_params(t.spec)?;
        for (c, n) in &cats {
            *by_category.entry(*c).or_default() += n;
        }
        rows.push(LayerCount {
            layer: t.spec.name.clone(),
            kind: kind(t.spec),
            params: cats.values().sum(),
            madds: layer_madds(t.spec, (t.input.1, t.input.2), (t.output.1, t.output.2))?,
            categories: cats,
        });
    }
    Ok(CountReport {
        model: model.name.clone(),
        resolution,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_madds: rows.iter().map(|r| r.madds).sum(),
        rows,
        by_category,
    })
}

pub fn count_params(model: &ModelGraph) -> Result<CountReport> {
    count(model, model.resolution)
}

pub fn count_madds(model: &ModelGraph, resolution: usize) -> Result<CountReport> {
    count(model, resolution)
}

/// Published budget targets, compared at 224×224.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GoldenRow {
    pub id: &'static str,
    pub params: f64,
    pub params_tol: f64,
    pub madds: Option<f64>,
    /// Relative tolerance on MAdds.
    pub madds_tol: f64,
    /// Compare the parameter count without the final classifier.
    pub backbone_only: bool,
}

pub fn golden_rows() -> Vec<GoldenRow> {
    let row = |id, params, params_tol, madds, backbone_only| GoldenRow {
        id,
        params,
        params_tol,
        madds,
        madds_tol: 0.02,
        backbone_only,
    };
    vec![
        row("mobilenetv2_x0.5_static", 2.0e6, 0.05e6, Some(97.0e6), false),
        row("mobilenetv2_x1.0_static", 3.5e6, 0.05e6, None, false),
        row("mobilenetv2_x0.5_dcd_pw_cls", 3.1e6, 0.1e6, Some(104.8e6), false),
        row("mobilenetv2_x1.0_dcd_pw_cls", 5.5e6, 0.15e6, None, false),
        row("resnet18_static", 11.1e6, 0.1e6, Some(1.81e9), true),
        row("resnet18_dcd", 14.0e6, 0.2e6, Some(1.83e9), true),
        row("resnet10_dcd", 6.5e6, 0.15e6, None, true),
    ]
}

/// Builds the graph a golden row refers to.
pub fn golden_graph(id: &str) -> Result<ModelGraph> {
    let pw_cls: BTreeSet<Placement> = [Placement::Pw, Placement::Cls].into();
    match id {
        "mobilenetv2_x0.5_static" => build_mobilenetv2(0.5, &BTreeSet::new(), None),
        "mobilenetv2_x1.0_static" => build_mobilenetv2(1.0, &BTreeSet::new(), None),
        "mobilenetv2_x0.5_dcd_pw_cls" => build_mobilenetv2(0.5, &pw_cls, Some(8)),
        "mobilenetv2_x1.0_dcd_pw_cls" => build_mobilenetv2(1.0, &pw_cls, Some(16)),
        "resnet18_static" => build_resnet(18, false, None),
        "resnet18_dcd" => build_resnet(18, true, Some(16)),
        "resnet10_dcd" => build_resnet(10, true, Some(16)),
        other => Err(crate::error::Error::Config(format!("unknown golden row {other}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GoldenResult {
    pub id: &'static str,
    pub params: u64,
    pub params_target: f64,
    pub params_ok: bool,
    pub madds: u64,
    pub madds_target: Option<f64>,
    pub madds_ok: bool,
}

impl GoldenResult {
    pub fn passed(&self) -> bool {
        self.params_ok && self.madds_ok
    }
}

pub fn check_golden(row: &GoldenRow) -> Result<GoldenResult> {
    let g = golden_graph(row.id)?;
    let rep = count(&g, 224)?;
    let params = if row.backbone_only {
        rep.backbone_params()
    } else {
        rep.total_params
    };
    let madds_ok = match row.madds {
        Some(t) => ((rep.total_madds as f64 - t) / t).abs() <= row.madds_tol,
        None => true,
    };
    Ok(GoldenResult {
        id: row.id,
        params,
        params_target: row.params,
        params_ok: (params as f64 - row.params).abs() <= row.params_tol,
        madds: rep.total_madds,
        madds_target: row.madds,
        madds_ok,
    })
}
