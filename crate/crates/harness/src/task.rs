//! Synthetic classification tasks and a small image-folder loader.
//!
//! Context-gated task: every input entry is N(0, 1) noise. A sample has a
//! context `c < M` and a label `y ∈ {0, 1}`. Channel `c` is shifted by
//! `context_strength` everywhere, so the context is faint per pixel and clear
//! after global pooling. Each context channel also carries an independent
//! plane wave of amplitude `distractor_strength`, random phase and one or two
//! cycles per side. Whole cycles sum to zero over the map, so the pooled
//! context is untouched while any local window sees its mean pushed around.
//! The remaining `channels − M` channels are shifted by
//! `±signal_strength · v_c`, with the sign given by the label and
//! `v_{2j} = u_j`, `v_{2j+1} = −u_j` for random unit vectors `u_j`. Averaged
//! over contexts the class-conditional means cancel, so a fixed filter sees
//! no first-order signal; with the context known the label is a linear read
//! of the pooled signal channels.
//!
//! Linear control task: no context; the label shifts the signal channels by
//! `±signal_strength · u_0`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use dcd_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{TaskConfig, TaskKind};

pub const IMAGE_SIZE: usize = 32;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub channels: usize,
    pub size: usize,
    pub classes: usize,
    /// `N·C·H·W` values, sample-major.
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.x[i * n..(i + 1) * n]
    }

    /// Stacks the given samples into an `N×C×H×W` tensor.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        let t = Tensor::new(vec![idx.len(), self.channels, self.size, self.size], data)?;
        Ok((t, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            x.extend_from_slice(self.sample(i));
        }
        Dataset {
            channels: self.channels,
            size: self.size,
            classes: self.classes,
            x,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn load(cfg: &TaskConfig) -> Result<Splits> {
    match cfg.kind {
        TaskKind::ContextGated | TaskKind::Linear => {
            // one stream per split so changing one size leaves the others alone
            Ok(Splits {
                train: synthetic(cfg, cfg.train, 0)?,
                val: synthetic(cfg, cfg.val, 1)?,
                test: synthetic(cfg, cfg.test, 2)?,
            })
        }
        TaskKind::Images => {
            let dir = cfg.dir.as_deref().context("images task needs task.dir")?;
            let all = load_image_folder(dir)?;
            split_images(&all, cfg.seed)
        }
    }
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

/// Per-context signal directions `v_c` (one for the linear task).
pub fn signal_directions(cfg: &TaskConfig) -> Vec<Vec<f64>> {
    let (contexts, dim) = match cfg.kind {
        TaskKind::Linear => (1, cfg.channels - 1),
        _ => (cfg.contexts, cfg.channels - cfg.contexts),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d1e5);
    let bases: Vec<Vec<f64>> = (0..contexts.div_ceil(2)).map(|_| unit_vector(dim, &mut rng)).collect();
    (0..contexts)
        .map(|c| {
            let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
            bases[c / 2].iter().map(|v| sign * v).collect()
        })
        .collect()
}

fn synthetic(cfg: &TaskConfig, n: usize, stream: u64) -> Result<Dataset> {
    if cfg.channels < 2 || cfg.size == 0 {
        bail!("synthetic tasks need at least 2 channels and a positive size");
    }
    let dirs = signal_directions(cfg);
    let first_signal = match cfg.kind {
        TaskKind::Linear => 1,
        _ => cfg.contexts,
    };
    let hw = cfg.size * cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut x = Vec::with_capacity(n * cfg.channels * hw);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let ctx = rng.gen_range(0..dirs.len());
        let y = rng.gen_range(0..2usize);
        let s = if y == 1 { 1.0 } else { -1.0 };
        for ch in 0..cfg.channels {
            let wave = if cfg.kind == TaskKind::ContextGated && ch < cfg.contexts {
                let (fy, fx) = (rng.gen_range(0..3) as f64, rng.gen_range(1..3) as f64);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                Some((fy, fx, phase))
            } else {
                None
            };
            let shift = if ch >= first_signal {
                s * cfg.signal_strength * dirs[ctx][ch - first_signal]
            } else if cfg.kind == TaskKind::ContextGated && ch == ctx {
                cfg.context_strength
            } else {
                0.0
            };
            for p in 0..hw {
                let d = match wave {
                    Some((fy, fx, phase)) => {
                        let (h, w) = ((p / cfg.size) as f64, (p % cfg.size) as f64);
                        let t = std::f64::consts::TAU * (fy * h + fx * w) / cfg.size as f64;
                        cfg.distractor_strength * (t + phase).cos()
                    }
                    None => 0.0,
                };
                x.push(rng.sample::<f64, _>(StandardNormal) + shift + d);
            }
        }
        labels.push(y);
    }
    Ok(Dataset {
        channels: cfg.channels,
        size: cfg.size,
        classes: 2,
        x,
        labels,
    })
}

/// Reads `dir/<class>/<image>` files, one class per subdirectory in name
/// order, resized to 32×32 RGB with values in [−0.5, 0.5].
pub fn load_image_folder(dir: &Path) -> Result<Dataset> {
    let mut classes: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    classes.sort();
    if classes.len() < 2 {
        bail!("{} needs at least two class subdirectories", dir.display());
    }
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(class_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let img = match image::open(&f) {
                Ok(i) => i,
                // non-image files are skipped
                Err(image::ImageError::Unsupported(_)) => continue,
                Err(e) => return Err(e).with_context(|| format!("decoding {}", f.display())),
            };
            let rgb = img
                .resize_exact(IMAGE_SIZE as u32, IMAGE_SIZE as u32, image::imageops::FilterType::Triangle)
                .to_rgb8();
            for ch in 0..3 {
                for p in rgb.pixels() {
                    x.push(p.0[ch] as f64 / 255.0 - 0.5);
                }
            }
            labels.push(label);
        }
    }
    if labels.is_empty() {
        bail!("no images found under {}", dir.display());
    }
    Ok(Dataset {
        channels: 3,
        size: IMAGE_SIZE,
        classes: classes.len(),
        x,
        labels,
    })
}

/// Seeded 70/15/15 split.
fn split_images(all: &Dataset, seed: u64) -> Result<Splits> {
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (all.len() * 15).div_ceil(100);
    let n_val = (all.len() * 15).div_ceil(100);
    if n_test + n_val >= all.len() {
        bail!("too few images ({}) to split", all.len());
    }
    Ok(Splits {
        test: all.subset(&idx[..n_test]),
        val: all.subset(&idx[n_test..n_test + n_val]),
        train: all.subset(&idx[n_test + n_val..]),
    })
}
