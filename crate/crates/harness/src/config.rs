//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 1
//! out = "runs/ctx"
//!
//! [model]
//! zoo = "tasknet"        # tasknet | mobilenetv2 | resnet
//! arm = "dcd"            # static | dcd | vanilla (tasknet only)
//! width = 12             # tasknet channels
//! r = 2
//! kernels = 4            # vanilla only
//! temperature = 30.0     # vanilla only
//! multiplier = 0.5       # mobilenetv2 width
//! placement = ["pw", "cls"]
//! depth = 18             # resnet
//! dcd = true             # resnet
//!
//! [optim]
//! lr = 0.1
//! momentum = 0.9
//! weight_decay = 1e-4
//! schedule = "cosine"    # cosine | step
//! step_every = 10        # step schedule: lr / 10 every this many epochs
//!
//! [train]
//! epochs = 15
//! batch_size = 32
//! workers = 1
//!
//! [task]
//! kind = "context_gated" # context_gated | linear | images
//! train = 1600
//! val = 300
//! test = 1000
//! channels = 8
//! size = 16
//! contexts = 4
//! context_strength = 0.2
//! signal_strength = 0.25
//! distractor_strength = 1.0
//! seed = 17
//! dir = "data/images"    # images only: one subdirectory per class
//!
//! [sweep]
//! arms = ["static", "dcd", "vanilla_tau1", "vanilla_tau30"]
//! seeds = [1, 2, 3]
//! ```
//!
//! A full graph may be given inline as `[model.graph]` instead of a zoo id;
//! it uses the same layout [`ModelGraph`] serializes to.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dcd_core::zoo::{build_mobilenetv2, build_resnet, build_task_net, Arm, ModelGraph, Placement};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_seed() -> u64 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            out: default_out(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            task: TaskConfig::default(),
            sweep: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub zoo: String,
    pub arm: String,
    pub width: usize,
    pub r: usize,
    pub kernels: usize,
    pub temperature: f64,
    pub multiplier: f64,
    pub placement: Vec<Placement>,
    pub depth: usize,
    pub dcd: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<ModelGraph>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            zoo: "tasknet".into(),
            arm: "dcd".into(),
            width: 12,
            r: 2,
            kernels: 4,
            temperature: 1.0,
            multiplier: 0.5,
            placement: vec![Placement::Pw, Placement::Cls],
            depth: 18,
            dcd: true,
            graph: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub step_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Schedule::Cosine,
            step_every: 10,
        }
    }
}

impl OptimConfig {
    /// Learning rate used throughout epoch `epoch` (1-based) of `total`.
    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        let e = epoch.saturating_sub(1);
        match self.schedule {
            Schedule::Cosine => {
                let t = e as f64 / total.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
            Schedule::Step => self.lr * 0.1f64.powi((e / self.step_every.max(1)) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Data-parallel shards per batch; 1 is the deterministic single-threaded path.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            workers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ContextGated,
    Linear,
    Images,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub channels: usize,
    pub size: usize,
    pub contexts: usize,
    /// Per-pixel offset marking the active context channel.
    pub context_strength: f64,
    /// Per-pixel amplitude of the label-carrying pattern.
    pub signal_strength: f64,
    /// Amplitude of the zero-mean waves on the context channels.
    pub distractor_strength: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::ContextGated,
            train: 1600,
            val: 300,
            test: 1000,
            channels: 8,
            size: 16,
            contexts: 4,
            context_strength: 0.2,
            signal_strength: 0.25,
            distractor_strength: 1.0,
            seed: 17,
            dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub arms: Vec<String>,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).context("parsing config")?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.batch_size == 0 {
            bail!("train.batch_size must be positive");
        }
        if self.train.workers == 0 {
            bail!("train.workers must be positive");
        }
        if !(self.optim.lr >= 0.0) || !(0.0..1.0).contains(&self.optim.momentum) {
            bail!("optim.lr must be non-negative and optim.momentum in [0, 1)");
        }
        if self.task.kind == TaskKind::Images && self.task.dir.is_none() {
            bail!("task.kind = \"images\" needs task.dir");
        }
        if self.task.kind == TaskKind::ContextGated && !(2..=self.task.channels / 2).contains(&self.task.contexts) {
            bail!("context_gated needs 2 ≤ contexts ≤ channels / 2");
        }
        Ok(())
    }

    /// Same configuration with the model arm replaced by a sweep label
    /// (`static`, `dcd`, `vanilla`, `vanilla_tau<T>`).
    pub fn with_arm(&self, label: &str) -> Result<Self> {
        let mut c = self.clone();
        if let Some(t) = label.strip_prefix("vanilla_tau") {
            c.model.arm = "vanilla".into();
            c.model.temperature = t.parse().with_context(|| format!("bad temperature in arm {label}"))?;
        } else {
            c.model.arm = label.into();
        }
        Ok(c)
    }

    pub fn arm(&self) -> Result<Arm> {
        Ok(match self.model.arm.as_str() {
            "static" => Arm::Static,
            "dcd" => Arm::Dcd { r: self.model.r },
            "vanilla" => Arm::Vanilla {
                kernels: self.model.kernels,
                temperature: self.model.temperature,
            },
            other => bail!("unknown arm {other}"),
        })
    }

    /// Graph for `in_channels × resolution²` inputs and `classes` outputs.
    pub fn graph(&self, in_channels: usize, resolution: usize, classes: usize) -> Result<ModelGraph> {
        if let Some(g) = &self.model.graph {
            g.validate()?;
            if g.in_channels != in_channels || g.classes != classes {
                bail!(
                    "inline graph expects {} channels / {} classes, task provides {in_channels} / {classes}",
                    g.in_channels,
                    g.classes
                );
            }
            return Ok(g.clone());
        }
        let m = &self.model;
        let mut g = match m.zoo.as_str() {
            "tasknet" => build_task_net(in_channels, m.width, classes, resolution, self.arm()?)?,
            "mobilenetv2" => {
                let p: BTreeSet<Placement> = m.placement.iter().copied().collect();
                build_mobilenetv2(m.multiplier, &p, Some(m.r))?
            }
            "resnet" => build_resnet(m.depth, m.dcd, Some(m.r))?,
            other => bail!("unknown model zoo id {other}"),
        };
        if m.zoo != "tasknet" {
            if g.in_channels != in_channels {
                bail!("{} expects {} input channels, task provides {in_channels}", m.zoo, g.in_channels);
            }
            retarget_classes(&mut g, classes)?;
            g.resolution = resolution;
        }
        Ok(g)
    }
}

fn retarget_classes(g: &mut ModelGraph, classes: usize) -> Result<()> {
    let last = g.convs_mut().into_iter().last().context("graph has no layers")?;
    last.c_out = classes;
    g.classes = classes;
    g.validate()?;
    Ok(())
}
