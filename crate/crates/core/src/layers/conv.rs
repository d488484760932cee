use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{Act, ConvSpec, DcdVariant, Dynamic, Init, ParamDecl};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{AttentionMode, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-forward options and side outputs.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    pub train: bool,
    /// When set, every DCD layer appends its per-sample Φ coefficients.
    pub phi: Option<Vec<(String, Tensor)>>,
    /// When set, every DCD layer appends the feature map it received.
    pub inputs: Option<Vec<(String, Tensor)>>,
}

impl ForwardCtx {
    pub fn train() -> Self {
        Self {
            train: true,
            ..Self::default()
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}

/// Stable per-tensor seed so that equally named tensors get equal values
/// across models built from the same seed.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn init_tensor(shape: Vec<usize>, init: Init, seed: u64, name: &str) -> Tensor {
    let n: usize = shape.iter().product();
    let bound = match init {
        Init::Zeros => return Tensor::zeros(shape),
        Init::Ones => return Tensor::ones(shape),
        Init::Kaiming(f) => (6.0 / f.max(1) as f64).sqrt(),
        Init::FanIn(f) => 1.0 / (f.max(1) as f64).sqrt(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("finite init")
}

/// A convolution layer of any kind described by a [`ConvSpec`], with its
/// learnable tensors and batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    spec: ConvSpec,
    params: BTreeMap<&'static str, Tensor>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

impl ConvLayer {
    pub fn new(spec: ConvSpec, seed: u64) -> Result<Self> {
        let decls = spec.param_decls()?;
        let mut params = BTreeMap::new();
        for ParamDecl { suffix, shape, init, .. } in decls {
            let full = format!("{}.{suffix}", spec.name);
            params.insert(suffix, init_tensor(shape, init, seed, &full));
        }
        Ok(Self {
            running_mean: vec![0.0; spec.c_out],
            running_var: vec![1.0; spec.c_out],
            spec,
            params,
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn param(&self, suffix: &str) -> Option<&Tensor> {
        self.params.get(suffix)
    }

    pub fn param_mut(&mut self, suffix: &str) -> Option<&mut Tensor> {
        self.params.get_mut(suffix)
    }

    pub fn running_stats(&self) -> (&[f64], &[f64]) {
        (&self.running_mean, &self.running_var)
    }

    pub fn set_running_stats(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if mean.len() != self.spec.c_out || var.len() != self.spec.c_out {
            return Err(Error::ShapeMismatch {
                op: "set_running_stats",
                left: vec![mean.len(), var.len()],
                right: vec![self.spec.c_out],
            });
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// Learnable tensors with fully qualified names, in name order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (s, t) in &self.params {
            f(&format!("{}.{s}", self.spec.name), t);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (s, t) in self.params.iter_mut() {
            f(&format!("{}.{s}", self.spec.name), t);
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Replaces learnable tensors found in `values` (fully qualified names).
    pub fn load_params(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let name = self.spec.name.clone();
        for (s, t) in self.params.iter_mut() {
            if let Some(v) = values.get(&format!("{name}.{s}")) {
                if v.shape() != t.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "load_params",
                        left: v.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                *t = v.clone();
            }
        }
        Ok(())
    }

    fn leaf(&self, tape: &mut Tape, suffix: &str) -> Result<Var> {
        let t = self
            .params
            .get(suffix)
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no parameter {suffix}", self.spec.name)))?;
        tape.param(format!("{}.{suffix}", self.spec.name), t)
    }

    /// Full layer: kernel generation, convolution, bias, batch norm, activation.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.spec.c_in {
            return Err(Error::ShapeMismatch {
                op: "conv_layer",
                left: xs,
                right: vec![self.spec.c_in],
            });
        }
        let geom = self.spec.geom();
        let mut y = match self.spec.dynamic {
            Dynamic::Static => {
                let w0 = self.leaf(tape, "w0")?;
                let w = tape.reshape(w0, self.spec.conv_weight_shape())?;
                tape.conv2d(x, w, geom)?
            }
            Dynamic::Dcd(_) | Dynamic::Vanilla(_) => {
                if let (Dynamic::Dcd(_), Some(rec)) = (&self.spec.dynamic, ctx.inputs.as_mut()) {
                    rec.push((self.spec.name.clone(), tape.value(x).clone()));
                }
                let pooled = tape.global_avg_pool(x)?;
                let kernels = self.sample_kernels(tape, pooled, ctx)?;
                let mut ys = Vec::with_capacity(kernels.len());
                for (n, w) in kernels.into_iter().enumerate() {
                    let xn = tape.slice0(x, n, n + 1)?;
                    let w = tape.reshape(w, self.spec.conv_weight_shape())?;
                    ys.push(tape.conv2d(xn, w, geom)?);
                }
                if ys.len() == 1 {
                    ys[0]
                } else {
                    tape.concat0(&ys)?
                }
            }
        };
        if self.spec.bias {
            let b = self.leaf(tape, "bias")?;
            y = tape.add_channel_bias(y, b)?;
        }
        if self.spec.bn {
            let g = self.leaf(tape, "bn.gamma")?;
            let b = self.leaf(tape, "bn.beta")?;
            if ctx.train {
                y = tape.batch_norm_train(y, g, b, BN_EPS)?;
                let (mean, var) = tape.batch_stats(y).expect("train-mode batch norm");
                let count = (tape.shape(y)[0] * tape.shape(y)[2..].iter().product::<usize>()) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for c in 0..self.spec.c_out {
                    self.running_mean[c] = BN_MOMENTUM * self.running_mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
                    self.running_var[c] = BN_MOMENTUM * self.running_var[c] + (1.0 - BN_MOMENTUM) * var[c] * unbias;
                }
            } else {
                y = tape.batch_norm_eval(y, g, b, &self.running_mean, &self.running_var, BN_EPS)?;
            }
        }
        match self.spec.act {
            Act::None => Ok(y),
            Act::Relu => tape.relu(y),
            Act::Relu6 => tape.relu6(y),
        }
    }

    /// Raw dynamic-branch output, `N × (|Λ| + |Φ|)`.
    fn branch(&self, tape: &mut Tape, pooled: Var) -> Result<Var> {
        let w1 = self.leaf(tape, "branch.w1")?;
        let b1 = self.leaf(tape, "branch.b1")?;
        let w2 = self.leaf(tape, "branch.w2")?;
        let b2 = self.leaf(tape, "branch.b2")?;
        let h = tape.matmul(pooled, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, w2)?;
        tape.add_row_bias(o, b2)
    }

    fn attention(&self, tape: &mut Tape, pooled: Var) -> Result<Var> {
        let Dynamic::Vanilla(cfg) = self.spec.dynamic else {
            unreachable!("attention on a non-vanilla layer")
        };
        let w1 = self.leaf(tape, "att.w1")?;
        let b1 = self.leaf(tape, "att.b1")?;
        let h = tape.matmul(pooled, w1)?;
        let mut logits = tape.add_row_bias(h, b1)?;
        if cfg.hidden.is_some() {
            let w2 = self.leaf(tape, "att.w2")?;
            let b2 = self.leaf(tape, "att.b2")?;
            let h = tape.relu(logits)?;
            let h = tape.matmul(h, w2)?;
            logits = tape.add_row_bias(h, b2)?;
        }
        match cfg.mode {
            AttentionMode::Softmax => tape.softmax(logits, cfg.temperature),
            AttentionMode::Sigmoid => tape.sigmoid(logits),
        }
    }

    /// One kernel per sample, each in [`ConvSpec::kernel_shape`].
    fn sample_kernels(&self, tape: &mut Tape, pooled: Var, ctx: &mut ForwardCtx) -> Result<Vec<Var>> {
        let n = tape.shape(pooled)[0];
        let kshape = self.spec.kernel_shape();
        let cfg = match self.spec.dynamic {
            Dynamic::Vanilla(_) => {
                let att = self.attention(tape, pooled)?;
                let stack = self.leaf(tape, "kernels")?;
                let agg = tape.matmul(att, stack)?;
                return (0..n)
                    .map(|i| {
                        let row = tape.slice0(agg, i, i + 1)?;
                        tape.reshape(row, kshape.clone())
                    })
                    .collect();
            }
            Dynamic::Dcd(c) => c,
            Dynamic::Static => unreachable!("static layers have no generated kernels"),
        };
        let dims = self.spec.latent()?.expect("dcd");
        let n_lambda = self.spec.lambda_len();
        let n_phi = self.spec.phi_len()?;
        let out = self.branch(tape, pooled)?;
        if let Some(rec) = ctx.phi.as_mut() {
            let phi = tape.value(out).slice_cols(n_lambda, n_lambda + n_phi)?;
            rec.push((self.spec.name.clone(), phi));
        }

        let w0 = self.leaf(tape, "w0")?;
        let p = self.leaf(tape, "p")?;
        let q = match cfg.variant {
            DcdVariant::Depthwise => None,
            _ => Some(self.leaf(tape, "q")?),
        };
        // right factor, transposed once for all samples
        let right_t = match q {
            Some(q) => tape.transpose(q)?,
            None => {
                let r = self.leaf(tape, "r")?;
                tape.transpose(r)?
            }
        };
        let r_joint = match cfg.variant {
            DcdVariant::KxkJoint => Some(self.leaf(tape, "r")?),
            DcdVariant::KxkChannel => {
                let kk = self.spec.k * self.spec.k;
                let mut onehot = Tensor::zeros(vec![kk, 1]);
                onehot.set(&[kk / 2, 0], 1.0);
                Some(tape.constant(onehot))
            }
            _ => None,
        };

        let blocks = self.spec.blocks();
        let (co, ci) = (self.spec.c_out, self.spec.c_in);
        let mut kernels = Vec::with_capacity(n);
        for i in 0..n {
            let row = tape.slice0(out, i, i + 1)?;
            let base = if n_lambda > 0 {
                let raw = tape.slice_cols(row, 0, n_lambda)?;
                let lam = tape.add_scalar(raw, 1.0)?;
                let lam = tape.reshape(lam, vec![n_lambda])?;
                tape.scale_rows(w0, lam)?
            } else {
                w0
            };
            let phi = tape.slice_cols(row, n_lambda, n_lambda + n_phi)?;
            let residual = match cfg.variant {
                DcdVariant::Pointwise { .. } if blocks > 1 => {
                    let (bo, bi, l) = (co / blocks, ci / blocks, dims.l);
                    let mut parts = Vec::with_capacity(blocks);
                    for b in 0..blocks {
                        let pb = tape.slice0(p, b * bo, (b + 1) * bo)?;
                        let qb_t = tape.slice_cols(right_t, b * bi, (b + 1) * bi)?;
                        let fb = tape.slice_cols(phi, b * l * l, (b + 1) * l * l)?;
                        let fb = tape.reshape(fb, vec![l, l])?;
                        let fq = tape.matmul(fb, qb_t)?;
                        parts.push(tape.matmul(pb, fq)?);
                    }
                    tape.block_diag(&parts)?
                }
                DcdVariant::Pointwise { .. } | DcdVariant::KxkChannel => {
                    let f = tape.reshape(phi, vec![dims.l, dims.l])?;
                    let fq = tape.matmul(f, right_t)?;
                    let res = tape.matmul(p, fq)?;
                    match r_joint {
                        Some(r) => {
                            let res = tape.reshape(res, vec![co, ci, 1])?;
                            tape.mode_n_product(res, r, 2)?
                        }
                        None => res,
                    }
                }
                DcdVariant::Depthwise => {
                    let f = tape.reshape(phi, vec![dims.l_k, dims.l_k])?;
                    let fr = tape.matmul(f, right_t)?;
                    tape.matmul(p, fr)?
                }
                DcdVariant::KxkJoint => {
                    let q = q.expect("joint Q");
                    let f = tape.reshape(phi, vec![dims.l, dims.l, dims.l_k])?;
                    let t = tape.mode_n_product(f, p, 0)?;
                    let t = tape.mode_n_product(t, q, 1)?;
                    tape.mode_n_product(t, r_joint.expect("joint R"), 2)?
                }
            };
            let w = tape.add(base, residual)?;
            debug_assert_eq!(tape.shape(w), kshape.as_slice());
            kernels.push(w);
        }
        Ok(kernels)
    }

    /// Per-sample kernels for pooled inputs `N×C_in`, stacked as
    /// `N × kernel_shape`.
    pub fn generate_weights(&self, pooled: &Tensor) -> Result<Tensor> {
        if matches!(self.spec.dynamic, Dynamic::Static) {
            return Err(Error::InvalidArgument(format!("{} is static", self.spec.name)));
        }
        let mut tape = Tape::new();
        let pv = tape.constant(pooled.clone());
        let ks = self.sample_kernels(&mut tape, pv, &mut ForwardCtx::eval())?;
        let mut shape = vec![ks.len()];
        shape.extend(self.spec.kernel_shape());
        let mut data = Vec::with_capacity(shape.iter().product());
        for k in ks {
            data.extend_from_slice(tape.value(k).data());
        }
        Tensor::new(shape, data)
    }

    /// Λ (`N×C_out`, or `None` when the head is disabled) and raw Φ
    /// (`N×|Φ|`) for pooled inputs.
    pub fn coefficients(&self, pooled: &Tensor) -> Result<(Option<Tensor>, Tensor)> {
        if self.spec.dcd().is_none() {
            return Err(Error::InvalidArgument(format!("{} is not a DCD layer", self.spec.name)));
        }
        let mut tape = Tape::new();
        let pv = tape.constant(pooled.clone());
        let out = self.branch(&mut tape, pv)?;
        let raw = tape.value(out);
        let nl = self.spec.lambda_len();
        let phi = raw.slice_cols(nl, raw.cols())?;
        let lam = if nl > 0 {
            Some(raw.slice_cols(0, nl)?.add_scalar(1.0)?)
        } else {
            None
        };
        Ok((lam, phi))
    }

    /// Attention scores `N×K` of a vanilla dynamic layer.
    pub fn attention_scores(&self, pooled: &Tensor) -> Result<Tensor> {
        if !matches!(self.spec.dynamic, Dynamic::Vanilla(_)) {
            return Err(Error::InvalidArgument(format!("{} is not a vanilla dynamic layer", self.spec.name)));
        }
        let mut tape = Tape::new();
        let pv = tape.constant(pooled.clone());
        let a = self.attention(&mut tape, pv)?;
        Ok(tape.value(a).clone())
    }
}

fn expect_variant(layer: &ConvLayer, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{} is not a {what} layer", layer.name())))
    }
}

fn dcd_variant(layer: &ConvLayer) -> Option<DcdVariant> {
    layer.spec().dcd().map(|c| c.variant)
}

/// `Σ_k π_k(x) W_k`, `N × kernel_shape`.
pub fn vanilla_weight(x_pooled: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    expect_variant(layer, matches!(layer.spec().dynamic, Dynamic::Vanilla(_)), "vanilla dynamic")?;
    layer.generate_weights(x_pooled)
}

/// `diag(λ(x))·W0 + P·Φ(x)·Qᵀ`, `N×C_out×C_in`.
pub fn dcd_weight_1x1(x_pooled: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    expect_variant(
        layer,
        dcd_variant(layer) == Some(DcdVariant::Pointwise { blocks: 1 }),
        "dense 1×1 DCD",
    )?;
    layer.generate_weights(x_pooled)
}

/// `diag(λ(x))·W0 + ⊕_b P_b·Φ_b(x)·Q_bᵀ`, `N×C_out×C_in`.
pub fn dcd_weight_sparse(x_pooled: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    expect_variant(
        layer,
        matches!(dcd_variant(layer), Some(DcdVariant::Pointwise { .. })),
        "pointwise DCD",
    )?;
    layer.generate_weights(x_pooled)
}

/// `diag(λ(x))·W0 + P·Φ(x)·Rᵀ`, `N×C×k²`.
pub fn dcd_weight_depthwise(x_pooled: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    expect_variant(layer, dcd_variant(layer) == Some(DcdVariant::Depthwise), "depthwise DCD")?;
    layer.generate_weights(x_pooled)
}

/// `W0 ×_out Λ(x) + Φ(x) ×_out P ×_in Q ×_k R`, `N×C_out×C_in×k²`.
pub fn dcd_weight_kxk_joint(x_pooled: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    expect_variant(layer, dcd_variant(layer) == Some(DcdVariant::KxkJoint), "joint k×k DCD")?;
    layer.generate_weights(x_pooled)
}

/// k×k static kernel scaled by Λ(x) plus `P·Φ(x)·Qᵀ` on the center tap,
/// `N×C_out×C_in×k²`.
pub fn dcd_weight_kxk_channel_only(x_pooled: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    expect_variant(layer, dcd_variant(layer) == Some(DcdVariant::KxkChannel), "channel-only k×k DCD")?;
    layer.generate_weights(x_pooled)
}
