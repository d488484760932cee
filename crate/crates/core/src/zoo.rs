//! Network graphs (MobileNetV2, ResNet, a small task CNN) with configurable
//! dynamic-convolution placement, and a runtime model built from a graph.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Act, ConvLayer, ConvSpec, DcdConfig, DcdVariant, Dynamic, ForwardCtx, Role, VanillaConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shortcut {
    None,
    Identity,
    Conv(ConvSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub body: Vec<ConvSpec>,
    pub shortcut: Shortcut,
    #[serde(default)]
    pub post_act: Act,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    Conv(ConvSpec),
    Block(Block),
    MaxPool {
        k: usize,
        stride: usize,
        padding: usize,
    },
    /// Spatial mean, keeping a `1×1` map so a classifier can follow as a conv.
    GlobalPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub name: String,
    pub in_channels: usize,
    pub resolution: usize,
    pub classes: usize,
    #[serde(default = "unit")]
    pub width: f64,
    pub stages: Vec<Stage>,
}

fn unit() -> f64 {
    1.0
}

/// Input and output extents `(C, H, W)` of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct TracedConv<'a> {
    pub spec: &'a ConvSpec,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Placement {
    Dw,
    Pw,
    Cls,
}

impl ModelGraph {
    /// Every convolution in execution order.
    pub fn convs(&self) -> Vec<&ConvSpec> {
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                Stage::Conv(c) => out.push(c),
                Stage::Block(b) => {
                    out.extend(b.body.iter());
                    if let Shortcut::Conv(c) = &b.shortcut {
                        out.push(c);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn convs_mut(&mut self) -> Vec<&mut ConvSpec> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            match s {
                Stage::Conv(c) => out.push(c),
                Stage::Block(b) => {
                    out.extend(b.body.iter_mut());
                    if let Shortcut::Conv(c) = &mut b.shortcut {
                        out.push(c);
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Propagates shapes from a `resolution × resolution` input, checking
    /// that consecutive layers compose.
    pub fn trace(&self, resolution: usize) -> Result<Vec<TracedConv<'_>>> {
        let mut out = Vec::new();
        let mut cur = (self.in_channels, resolution, resolution);
        let mut names = BTreeSet::new();
        let mut conv = |spec: &ConvSpec, input: (usize, usize, usize)| -> Result<(usize, usize, usize)> {
            spec.validate()?;
            if !names.insert(spec.name.clone()) {
                return Err(Error::Config(format!("duplicate layer name {}", spec.name)));
            }
            if input.0 != spec.c_in {
                return Err(Error::Config(format!(
                    "{} expects {} input channels, receives {}",
                    spec.name, spec.c_in, input.0
                )));
            }
            let g = spec.geom();
            let h = g.output_extent(input.1, spec.k);
            let w = g.output_extent(input.2, spec.k);
            let (Some(h), Some(w)) = (h, w) else {
                return Err(Error::Config(format!("{} does not fit a {}×{} input", spec.name, input.1, input.2)));
            };
            Ok((spec.c_out, h, w))
        };
        for stage in &self.stages {
            match stage {
                Stage::Conv(c) => {
                    let o = conv(c, cur)?;
                    out.push(TracedConv {
                        spec: c,
                        input: cur,
                        output: o,
                    });
                    cur = o;
                }
                Stage::Block(b) => {
                    let input = cur;
                    let mut x = cur;
                    for c in &b.body {
                        let o = conv(c, x)?;
                        out.push(TracedConv {
                            spec: c,
                            input: x,
                            output: o,
                        });
                        x = o;
                    }
                    match &b.shortcut {
                        Shortcut::None => {}
                        Shortcut::Identity => {
                            if input != x {
                                return Err(Error::Config(format!(
                                    "{}: identity shortcut {input:?} does not match body output {x:?}",
                                    b.name
                                )));
                            }
                        }
                        Shortcut::Conv(c) => {
                            let o = conv(c, input)?;
                            if o != x {
                                return Err(Error::Config(format!(
                                    "{}: shortcut output {o:?} does not match body output {x:?}",
                                    b.name
                                )));
                            }
                            out.push(TracedConv { spec: c, input, output: o });
                        }
                    }
                    cur = x;
                }
                Stage::MaxPool { k, stride, padding } => {
                    let g = crate::tensor::Conv2dGeom::new(*stride, *padding, 1);
                    match (g.output_extent(cur.1, *k), g.output_extent(cur.2, *k)) {
                        (Some(h), Some(w)) if padding < k => cur = (cur.0, h, w),
                        _ => return Err(Error::Config(format!("max pool does not fit {cur:?}"))),
                    }
                }
                Stage::GlobalPool => cur = (cur.0, 1, 1),
            }
        }
        if cur != (self.classes, 1, 1) {
            return Err(Error::Config(format!(
                "graph ends in {cur:?}, expected {} classes at 1×1",
                self.classes
            )));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.trace(self.resolution)?;
        for c in self.convs() {
            if let Dynamic::Dcd(cfg) = &c.dynamic {
                let ok = match cfg.variant {
                    DcdVariant::Depthwise => c.role == Role::Depthwise,
                    DcdVariant::Pointwise { .. } => c.k == 1 && c.role != Role::Depthwise,
                    DcdVariant::KxkJoint | DcdVariant::KxkChannel => c.k > 1 && c.role != Role::Depthwise,
                };
                if !ok {
                    return Err(Error::Config(format!("{:?} DCD cannot be placed on {}", cfg.variant, c.name)));
                }
            }
        }
        Ok(())
    }

    /// Sets the kind of every convolution with one of the given roles.
    pub fn set_dynamic(&mut self, roles: &[Role], dynamic: Dynamic) {
        for c in self.convs_mut() {
            if roles.contains(&c.role) {
                c.dynamic = dynamic;
            }
        }
    }

    /// Sets the L multiplier of every DCD layer.
    pub fn set_l_mult(&mut self, mult: f64) {
        for c in self.convs_mut() {
            if let Dynamic::Dcd(cfg) = &mut c.dynamic {
                cfg.l_mult = mult;
            }
        }
    }

    /// Sets the block count of every pointwise DCD layer.
    pub fn set_blocks(&mut self, blocks: usize) {
        for c in self.convs_mut() {
            if let Dynamic::Dcd(DcdConfig {
                variant: DcdVariant::Pointwise { blocks: b },
                ..
            }) = &mut c.dynamic
            {
                *b = blocks;
            }
        }
    }
}

/// Rounds `v` to a multiple of 8, never dropping more than 10%.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut n = (((v + d / 2.0) / d).floor() * d).max(d) as usize;
    if (n as f64) < 0.9 * v {
        n += divisor;
    }
    n
}

/// Default branch reduction ratio: 16 at full width, 8 for narrower models.
pub fn default_reduction(width: f64) -> usize {
    if width >= 1.0 {
        16
    } else {
        8
    }
}

pub fn build_mobilenetv2(width: f64, placement: &BTreeSet<Placement>, r: Option<usize>) -> Result<ModelGraph> {
    if ![0.35, 0.5, 0.75, 1.0].contains(&width) {
        return Err(Error::Config(format!("unsupported MobileNetV2 width {width}")));
    }
    let r = r.unwrap_or_else(|| default_reduction(width));
    let settings: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let mut input = make_divisible(32.0 * width, 8);
    let last = make_divisible(1280.0 * width.max(1.0), 8);
    let mut stages = vec![Stage::Conv(
        ConvSpec::conv("stem", 3, input, 3, 2, Act::Relu6).with_role(Role::Stem),
    )];
    let mut idx = 0;
    for (t, c, n, s) in settings {
        let out = make_divisible(c as f64 * width, 8);
        for i in 0..n {
            let stride = if i == 0 { s } else { 1 };
            let hidden = input * t;
            let name = format!("block{idx}");
            let mut body = Vec::new();
            if t != 1 {
                body.push(ConvSpec::conv(format!("{name}.expand"), input, hidden, 1, 1, Act::Relu6).with_role(Role::Expand));
            }
            body.push(ConvSpec::depthwise(format!("{name}.dw"), hidden, 3, stride, Act::Relu6));
            body.push(ConvSpec::conv(format!("{name}.project"), hidden, out, 1, 1, Act::None).with_role(Role::Project));
            let shortcut = if stride == 1 && input == out {
                Shortcut::Identity
            } else {
                Shortcut::None
            };
            stages.push(Stage::Block(Block {
                name,
                body,
                shortcut,
                post_act: Act::None,
            }));
            input = out;
            idx += 1;
        }
    }
    stages.push(Stage::Conv(
        ConvSpec::conv("head", input, last, 1, 1, Act::Relu6).with_role(Role::Conv1x1),
    ));
    stages.push(Stage::GlobalPool);
    stages.push(Stage::Conv(ConvSpec::classifier("classifier", last, 1000)));
    let mut g = ModelGraph {
        name: format!("mobilenetv2_x{width}"),
        in_channels: 3,
        resolution: 224,
        classes: 1000,
        width,
        stages,
    };
    let pw = Dynamic::Dcd(DcdConfig::new(DcdVariant::Pointwise { blocks: 1 }, r));
    if placement.contains(&Placement::Pw) {
        g.set_dynamic(&[Role::Expand, Role::Project, Role::Conv1x1], pw);
    }
    if placement.contains(&Placement::Dw) {
        g.set_dynamic(&[Role::Depthwise], Dynamic::Dcd(DcdConfig::new(DcdVariant::Depthwise, r)));
    }
    if placement.contains(&Placement::Cls) {
        g.set_dynamic(&[Role::Classifier], pw);
    }
    g.validate()?;
    Ok(g)
}

pub fn build_resnet(depth: usize, dcd: bool, r: Option<usize>) -> Result<ModelGraph> {
    let (bottleneck, counts): (bool, [usize; 4]) = match depth {
        10 => (false, [1, 1, 1, 1]),
        18 => (false, [2, 2, 2, 2]),
        50 => (true, [3, 4, 6, 3]),
        _ => return Err(Error::Config(format!("unsupported ResNet depth {depth}"))),
    };
    let r = r.unwrap_or(16);
    let expansion = if bottleneck { 4 } else { 1 };
    let mut stages = vec![
        Stage::Conv(ConvSpec::conv("stem", 3, 64, 7, 2, Act::Relu).with_role(Role::Stem)),
        Stage::MaxPool {
            k: 3,
            stride: 2,
            padding: 1,
        },
    ];
    let mut input = 64;
    for (si, (&n, width)) in counts.iter().zip([64, 128, 256, 512]).enumerate() {
        for bi in 0..n {
            let stride = if bi == 0 && si > 0 { 2 } else { 1 };
            let name = format!("layer{}.{bi}", si + 1);
            let out = width * expansion;
            let body = if bottleneck {
                vec![
                    ConvSpec::conv(format!("{name}.conv1"), input, width, 1, 1, Act::Relu).with_role(Role::Conv1x1),
                    ConvSpec::conv(format!("{name}.conv2"), width, width, 3, stride, Act::Relu).with_role(Role::Conv3x3),
                    ConvSpec::conv(format!("{name}.conv3"), width, out, 1, 1, Act::None).with_role(Role::Conv1x1),
                ]
            } else {
                vec![
                    ConvSpec::conv(format!("{name}.conv1"), input, width, 3, stride, Act::Relu).with_role(Role::Conv3x3),
                    ConvSpec::conv(format!("{name}.conv2"), width, out, 3, 1, Act::None).with_role(Role::Conv3x3),
                ]
            };
            let shortcut = if stride != 1 || input != out {
                Shortcut::Conv(ConvSpec::conv(format!("{name}.downsample"), input, out, 1, stride, Act::None).with_role(Role::Shortcut))
            } else {
                Shortcut::Identity
            };
            stages.push(Stage::Block(Block {
                name,
                body,
                shortcut,
                post_act: Act::Relu,
            }));
            input = out;
        }
    }
    stages.push(Stage::GlobalPool);
    stages.push(Stage::Conv(ConvSpec::classifier("fc", input, 1000)));
    let mut g = ModelGraph {
        name: format!("resnet{depth}"),
        in_channels: 3,
        resolution: 224,
        classes: 1000,
        width: 1.0,
        stages,
    };
    if dcd {
        g.set_dynamic(&[Role::Conv3x3], Dynamic::Dcd(DcdConfig::new(DcdVariant::KxkChannel, r)));
        g.set_dynamic(
            &[Role::Conv1x1, Role::Shortcut],
            Dynamic::Dcd(DcdConfig::new(DcdVariant::Pointwise { blocks: 1 }, r)),
        );
    }
    g.validate()?;
    Ok(g)
}

/// Which convolution the small task network uses in its dynamic slots.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arm", rename_all = "snake_case")]
pub enum Arm {
    Static,
    Dcd { r: usize },
    Vanilla { kernels: usize, temperature: f64 },
}

impl Arm {
    pub fn label(&self) -> String {
        match self {
            Arm::Static => "static".into(),
            Arm::Dcd { .. } => "dcd".into(),
            Arm::Vanilla { temperature, .. } => format!("vanilla_tau{temperature}"),
        }
    }
}

/// Two 3×3 convolutions (the second one dynamic), global pooling and a
/// linear classifier.
pub fn build_task_net(in_channels: usize, width: usize, classes: usize, resolution: usize, arm: Arm) -> Result<ModelGraph> {
    let mut conv2 = ConvSpec::conv("conv2", width, width, 3, 1, Act::Relu).with_role(Role::Conv3x3);
    conv2.dynamic = match arm {
        Arm::Static => Dynamic::Static,
        Arm::Dcd { r } => Dynamic::Dcd(DcdConfig::new(DcdVariant::KxkChannel, r)),
        Arm::Vanilla { kernels, temperature } => Dynamic::Vanilla(VanillaConfig {
            kernels,
            mode: crate::tensor::AttentionMode::Softmax,
            temperature,
            hidden: None,
        }),
    };
    let g = ModelGraph {
        name: format!("tasknet_{}", arm.label()),
        in_channels,
        resolution,
        classes,
        width: 1.0,
        stages: vec![
            Stage::Conv(ConvSpec::conv("conv1", in_channels, width, 3, 1, Act::Relu).with_role(Role::Stem)),
            Stage::Conv(conv2),
            Stage::GlobalPool,
            Stage::Conv(ConvSpec::classifier("classifier", width, classes)),
        ],
    };
    g.validate()?;
    Ok(g)
}

/// Learnable and running-statistic tensors of a model, keyed by name.
pub type StateDict = BTreeMap<String, Tensor>;

/// Runtime network: the graph plus one [`ConvLayer`] per convolution.
#[derive(Clone, Debug)]
pub struct Model {
    graph: ModelGraph,
    layers: Vec<ConvLayer>,
}

impl Model {
    pub fn new(graph: ModelGraph, seed: u64) -> Result<Self> {
        graph.validate()?;
        let layers = graph
            .convs()
            .into_iter()
            .map(|c| ConvLayer::new(c.clone(), seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { graph, layers })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(ConvLayer::num_params).sum()
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for l in &self.layers {
            l.visit_params(f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }

    /// Learnable tensors followed by batch-norm running statistics, in layer
    /// order.
    pub fn state_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.visit_params(&mut |n, t| out.push((n.to_string(), t.clone())));
            if l.spec().bn {
                let (m, v) = l.running_stats();
                let c = m.len();
                out.push((
                    format!("{}.bn.running_mean", l.name()),
                    Tensor::new(vec![c], m.to_vec()).expect("finite"),
                ));
                out.push((
                    format!("{}.bn.running_var", l.name()),
                    Tensor::new(vec![c], v.to_vec()).expect("finite"),
                ));
            }
        }
        out
    }

    /// Replaces the full state. Every tensor must be present with the
    /// expected shape; the first discrepancy is reported by name.
    pub fn load_state(&mut self, state: &StateDict) -> Result<()> {
        for (name, t) in self.state_entries() {
            match state.get(&name) {
                None => return Err(Error::Config(format!("state is missing tensor {name}"))),
                Some(v) if v.shape() != t.shape() => {
                    return Err(Error::Config(format!(
                        "tensor {name} has shape {:?}, model expects {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        for l in &mut self.layers {
            l.load_params(state)?;
            if l.spec().bn {
                let m = state[&format!("{}.bn.running_mean", l.name())].data().to_vec();
                let v = state[&format!("{}.bn.running_var", l.name())].data().to_vec();
                l.set_running_stats(m, v)?;
            }
        }
        Ok(())
    }

    /// Logits `N×classes` for an `N×C×H×W` input already on the tape.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let mut i = 0;
        let mut cur = x;
        // layers are stored in `graph.convs()` order
        for stage in &self.graph.stages {
            match stage {
                Stage::Conv(_) => {
                    cur = self.layers[i].forward(tape, cur, ctx)?;
                    i += 1;
                }
                Stage::Block(b) => {
                    let input = cur;
                    for _ in &b.body {
                        cur = self.layers[i].forward(tape, cur, ctx)?;
                        i += 1;
                    }
                    let skip = match &b.shortcut {
                        Shortcut::None => None,
                        Shortcut::Identity => Some(input),
                        Shortcut::Conv(_) => {
                            let s = self.layers[i].forward(tape, input, ctx)?;
                            i += 1;
                            Some(s)
                        }
                    };
                    if let Some(s) = skip {
                        cur = tape.add(cur, s)?;
                    }
                    cur = match b.post_act {
                        Act::None => cur,
                        Act::Relu => tape.relu(cur)?,
                        Act::Relu6 => tape.relu6(cur)?,
                    };
                }
                Stage::MaxPool { k, stride, padding } => cur = tape.max_pool2d(cur, *k, *stride, *padding)?,
                Stage::GlobalPool => {
                    let n = tape.shape(cur)[0];
                    let c = tape.shape(cur)[1];
                    let p = tape.global_avg_pool(cur)?;
                    cur = tape.reshape(p, vec![n, c, 1, 1])?;
                }
            }
        }
        let n = tape.shape(cur)[0];
        tape.reshape(cur, vec![n, self.graph.classes])
    }

    /// Convenience forward on a fresh tape.
    pub fn logits(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut ctx = ForwardCtx {
            train,
            ..ForwardCtx::default()
        };
        let y = self.forward(&mut tape, xv, &mut ctx)?;
        Ok(tape.value(y).clone())
    }
}
