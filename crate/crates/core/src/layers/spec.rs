use serde::{Deserialize, Serialize};

use super::latent::{check_kxk, default_latent_dim, default_latent_dims_kxk, scaled_latent_dim, LatentDims};
use crate::error::{Error, Result};
use crate::tensor::{AttentionMode, Conv2dGeom};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    #[default]
    None,
    Relu,
    Relu6,
}

/// Where a convolution sits in its network. Used for placement rules and for
/// the classifier budget category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Stem,
    Expand,
    Depthwise,
    Project,
    Conv3x3,
    Conv1x1,
    Shortcut,
    Classifier,
    #[default]
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum DcdVariant {
    /// `ΛW0 + ⊕_b P_b Φ_b Q_bᵀ`; one block is the dense 1×1 form.
    Pointwise { blocks: usize },
    /// `ΛW0 + PΦRᵀ` on a `C×k²` depthwise kernel.
    Depthwise,
    /// `W0 ×_out Λ + Φ ×_out P ×_in Q ×_k R`.
    KxkJoint,
    /// k×k static kernel plus a 1×1 dynamic residual on the center tap.
    KxkChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcdConfig {
    pub variant: DcdVariant,
    /// Reduction ratio of the dynamic branch's hidden layer.
    pub r: usize,
    /// Scales the default latent channel count `L`.
    #[serde(default = "one")]
    pub l_mult: f64,
    /// Whether the channel-wise attention head Λ is present.
    #[serde(default = "yes")]
    pub lambda: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl DcdConfig {
    pub fn new(variant: DcdVariant, r: usize) -> Self {
        Self {
            variant,
            r,
            l_mult: 1.0,
            lambda: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaConfig {
    /// Number of static kernels.
    pub kernels: usize,
    pub mode: AttentionMode,
    pub temperature: f64,
    /// Hidden width of a two-layer attention branch; `None` is a single FC.
    pub hidden: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dynamic {
    #[default]
    Static,
    Dcd(DcdConfig),
    Vanilla(VanillaConfig),
}

/// Budget category of a learnable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    StaticKernel,
    DynamicBranch,
    Projections,
    BatchNorm,
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    Kaiming(usize),
    /// Uniform in `±1 / sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub suffix: &'static str,
    pub shape: Vec<usize>,
    pub category: Category,
    pub init: Init,
}

/// Full description of one convolution-like layer, static or dynamic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub name: String,
    #[serde(default)]
    pub role: Role,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    #[serde(default = "one_usize")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "one_usize")]
    pub groups: usize,
    #[serde(default)]
    pub bias: bool,
    #[serde(default)]
    pub bn: bool,
    #[serde(default)]
    pub act: Act,
    #[serde(default)]
    pub dynamic: Dynamic,
}

fn one_usize() -> usize {
    1
}

impl ConvSpec {
    /// Static `k×k` convolution with "same" padding, batch norm and `act`.
    pub fn conv(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize, act: Act) -> Self {
        Self {
            name: name.into(),
            role: Role::Other,
            c_in,
            c_out,
            k,
            stride,
            padding: k / 2,
            groups: 1,
            bias: false,
            bn: true,
            act,
            dynamic: Dynamic::Static,
        }
    }

    pub fn depthwise(name: impl Into<String>, c: usize, k: usize, stride: usize, act: Act) -> Self {
        Self {
            groups: c,
            role: Role::Depthwise,
            ..Self::conv(name, c, c, k, stride, act)
        }
    }

    /// Fully connected classifier expressed as a 1×1 convolution with bias.
    pub fn classifier(name: impl Into<String>, c_in: usize, classes: usize) -> Self {
        Self {
            role: Role::Classifier,
            bias: true,
            bn: false,
            ..Self::conv(name, c_in, classes, 1, 1, Act::None)
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn with_dynamic(mut self, dynamic: Dynamic) -> Self {
        self.dynamic = dynamic;
        self
    }

    pub fn geom(&self) -> Conv2dGeom {
        Conv2dGeom::new(self.stride, self.padding, self.groups)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.c_in && self.c_in == self.c_out
    }

    /// Shape the static kernel is stored in: `C×k²` for depthwise, `C_out×C_in`
    /// for 1×1, `C_out×C_in×k²` otherwise.
    pub fn kernel_shape(&self) -> Vec<usize> {
        let kk = self.k * self.k;
        if self.is_depthwise() {
            vec![self.c_out, kk]
        } else if self.k == 1 {
            vec![self.c_out, self.c_in / self.groups]
        } else {
            vec![self.c_out, self.c_in / self.groups, kk]
        }
    }

    /// `C_out × (C_in/groups) × k × k` as consumed by the convolution.
    pub fn conv_weight_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.c_in / self.groups, self.k, self.k]
    }

    pub fn fan_in(&self) -> usize {
        self.c_in / self.groups * self.k * self.k
    }

    pub fn dcd(&self) -> Option<&DcdConfig> {
        match &self.dynamic {
            Dynamic::Dcd(c) => Some(c),
            _ => None,
        }
    }

    /// Latent sizes of a DCD layer; `None` for other kinds. For the sparse
    /// form `l` is the per-block size.
    pub fn latent(&self) -> Result<Option<LatentDims>> {
        let Some(cfg) = self.dcd() else { return Ok(None) };
        let d = match cfg.variant {
            DcdVariant::Pointwise { blocks } => {
                if blocks == 0 || self.c_in % blocks != 0 || self.c_out % blocks != 0 {
                    return Err(Error::Config(format!(
                        "{}: {blocks} blocks must divide C_in={} and C_out={}",
                        self.name, self.c_in, self.c_out
                    )));
                }
                LatentDims {
                    l: scaled_latent_dim(default_latent_dim(self.c_in / blocks), cfg.l_mult),
                    l_k: 1,
                }
            }
            DcdVariant::Depthwise => LatentDims {
                l: 1,
                l_k: self.k * self.k / 2,
            },
            DcdVariant::KxkJoint => {
                let base = default_latent_dims_kxk(self.c_in, self.k)?;
                let d = LatentDims {
                    l: scaled_latent_dim(base.l, cfg.l_mult),
                    l_k: base.l_k,
                };
                check_kxk(d, self.c_in, self.k)?;
                d
            }
            DcdVariant::KxkChannel => LatentDims {
                l: scaled_latent_dim(default_latent_dim(self.c_in), cfg.l_mult),
                l_k: 1,
            },
        };
        Ok(Some(d))
    }

    pub fn blocks(&self) -> usize {
        match self.dcd().map(|c| c.variant) {
            Some(DcdVariant::Pointwise { blocks }) => blocks,
            _ => 1,
        }
    }

    /// Number of Φ coefficients the dynamic branch emits per sample.
    pub fn phi_len(&self) -> Result<usize> {
        let Some(cfg) = self.dcd() else { return Ok(0) };
        let d = self.latent()?.expect("dcd layer has latent dims");
        Ok(match cfg.variant {
            DcdVariant::Pointwise { blocks } => blocks * d.l * d.l,
            DcdVariant::Depthwise => d.l_k * d.l_k,
            DcdVariant::KxkJoint => d.l * d.l * d.l_k,
            DcdVariant::KxkChannel => d.l * d.l,
        })
    }

    pub fn lambda_len(&self) -> usize {
        match self.dcd() {
            Some(c) if c.lambda => self.c_out,
            _ => 0,
        }
    }

    /// Hidden width of the dynamic branch, `⌊C_in / r⌋`.
    pub fn branch_hidden(&self) -> Option<usize> {
        match &self.dynamic {
            Dynamic::Static => None,
            Dynamic::Dcd(c) => Some(self.c_in / c.r.max(1)),
            Dynamic::Vanilla(v) => v.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("{}: {m}", self.name)));
        if self.c_in == 0 || self.c_out == 0 || self.k == 0 || self.stride == 0 || self.groups == 0 {
            return err("extents must be positive".into());
        }
        if self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return err(format!("groups {} must divide channels", self.groups));
        }
        match &self.dynamic {
            Dynamic::Static => {}
            Dynamic::Vanilla(v) => {
                if self.groups != 1 {
                    return err("vanilla dynamic convolution supports groups=1 only".into());
                }
                if v.kernels == 0 || !(v.temperature > 0.0) || v.hidden == Some(0) {
                    return err("vanilla config needs K ≥ 1, τ > 0 and a non-empty hidden layer".into());
                }
            }
            Dynamic::Dcd(c) => {
                if c.r == 0 || self.c_in / c.r == 0 {
                    return err(format!("reduction ratio {} leaves no hidden units for C_in={}", c.r, self.c_in));
                }
                if !(c.l_mult > 0.0) {
                    return err("L multiplier must be positive".into());
                }
                match c.variant {
                    DcdVariant::Pointwise { .. } if self.k != 1 || self.groups != 1 => {
                        return err("pointwise DCD needs a dense 1×1 convolution".into());
                    }
                    DcdVariant::Depthwise if !self.is_depthwise() || self.k < 3 => {
                        return err("depthwise DCD needs a depthwise convolution with k ≥ 3".into());
                    }
                    DcdVariant::KxkJoint | DcdVariant::KxkChannel if self.groups != 1 => {
                        return err("k×k DCD needs groups=1".into());
                    }
                    DcdVariant::KxkChannel if self.k % 2 == 0 => {
                        return err("channel-only k×k DCD needs an odd kernel size".into());
                    }
                    _ => {}
                }
                self.latent()?;
            }
        }
        Ok(())
    }

    /// Every learnable tensor this layer allocates, in allocation order.
    pub fn param_decls(&self) -> Result<Vec<ParamDecl>> {
        self.validate()?;
        let cls = self.role == Role::Classifier;
        let cat = |c: Category| if cls { Category::Classifier } else { c };
        let decl = |suffix, shape: Vec<usize>, category, init| ParamDecl {
            suffix,
            shape,
            category: cat(category),
            init,
        };
        let mut out = Vec::new();
        match &self.dynamic {
            Dynamic::Static => {
                out.push(decl(
                    "w0",
                    self.kernel_shape(),
                    Category::StaticKernel,
                    Init::Kaiming(self.fan_in()),
                ));
            }
            Dynamic::Vanilla(v) => {
                let d: usize = self.kernel_shape().iter().product();
                out.push(decl(
                    "kernels",
                    vec![v.kernels, d],
                    Category::StaticKernel,
                    Init::Kaiming(self.fan_in()),
                ));
                match v.hidden {
                    None => {
                        out.push(decl(
                            "att.w1",
                            vec![self.c_in, v.kernels],
                            Category::DynamicBranch,
                            Init::FanIn(self.c_in),
                        ));
                        out.push(decl("att.b1", vec![v.kernels], Category::DynamicBranch, Init::Zeros));
                    }
                    Some(h) => {
                        out.push(decl("att.w1", vec![self.c_in, h], Category::DynamicBranch, Init::FanIn(self.c_in)));
                        out.push(decl("att.b1", vec![h], Category::DynamicBranch, Init::Zeros));
                        out.push(decl("att.w2", vec![h, v.kernels], Category::DynamicBranch, Init::FanIn(h)));
                        out.push(decl("att.b2", vec![v.kernels], Category::DynamicBranch, Init::Zeros));
                    }
                }
            }
            Dynamic::Dcd(c) => {
                let d = self.latent()?.expect("dcd");
                let kk = self.k * self.k;
                out.push(decl(
                    "w0",
                    self.kernel_shape(),
                    Category::StaticKernel,
                    Init::Kaiming(self.fan_in()),
                ));
                match c.variant {
                    DcdVariant::Pointwise { .. } | DcdVariant::KxkChannel => {
                        out.push(decl("p", vec![self.c_out, d.l], Category::Projections, Init::FanIn(d.l)));
                        out.push(decl("q", vec![self.c_in, d.l], Category::Projections, Init::FanIn(self.c_in)));
                    }
                    DcdVariant::Depthwise => {
                        out.push(decl("p", vec![self.c_out, d.l_k], Category::Projections, Init::FanIn(d.l_k)));
                        out.push(decl("r", vec![kk, d.l_k], Category::Projections, Init::FanIn(kk)));
                    }
                    DcdVariant::KxkJoint => {
                        out.push(decl("p", vec![self.c_out, d.l], Category::Projections, Init::FanIn(d.l)));
                        out.push(decl("q", vec![self.c_in, d.l], Category::Projections, Init::FanIn(self.c_in)));
                        out.push(decl("r", vec![kk, d.l_k], Category::Projections, Init::FanIn(kk)));
                    }
                }
                let h = self.branch_hidden().expect("dcd branch");
                let dout = self.lambda_len() + self.phi_len()?;
                out.push(decl(
                    "branch.w1",
                    vec![self.c_in, h],
                    Category::DynamicBranch,
                    Init::FanIn(self.c_in),
                ));
                out.push(decl("branch.b1", vec![h], Category::DynamicBranch, Init::Zeros));
                out.push(decl("branch.w2", vec![h, dout], Category::DynamicBranch, Init::Zeros));
                out.push(decl("branch.b2", vec![dout], Category::DynamicBranch, Init::Zeros));
            }
        }
        if self.bias {
            out.push(decl("bias", vec![self.c_out], Category::StaticKernel, Init::Zeros));
        }
        if self.bn {
            out.push(decl("bn.gamma", vec![self.c_out], Category::BatchNorm, Init::Ones));
            out.push(decl("bn.beta", vec![self.c_out], Category::BatchNorm, Init::Zeros));
        }
        Ok(out)
    }
}
