#![allow(dead_code)]

use std::collections::BTreeMap;

use dcd_core::layers::{ConvLayer, ForwardCtx};
use dcd_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale)).unwrap()
}

/// Moves every learnable tensor of `layer` to a random point so no gradient
/// is structurally zero (the branch output layer starts at zero).
pub fn randomize(layer: &mut ConvLayer, seed: u64) {
    let mut r = rng(seed);
    layer.visit_params_mut(&mut |name, t| {
        let shape = t.shape().to_vec();
        *t = if name.ends_with("bn.gamma") {
            Tensor::from_fn(shape, |_| r.gen_range(0.5..1.5)).unwrap()
        } else {
            Tensor::from_fn(shape, |_| r.gen_range(-0.5..0.5)).unwrap()
        };
    });
}

pub fn layer_params(layer: &ConvLayer) -> BTreeMap<String, Tensor> {
    let mut m = BTreeMap::new();
    layer.visit_params(&mut |n, t| {
        m.insert(n.to_string(), t.clone());
    });
    m
}

pub fn layer_output(layer: &ConvLayer, p: &BTreeMap<String, Tensor>, train: bool) -> Result<Tensor> {
    let mut l = layer.clone();
    l.load_params(p)?;
    let mut tape = Tape::new();
    let x = tape.constant(p["input"].clone());
    let y = l.forward(
        &mut tape,
        x,
        &mut ForwardCtx {
            train,
            ..ForwardCtx::default()
        },
    )?;
    Ok(tape.value(y).clone())
}

/// `Σ (y − y0) ⊙ c`. Centering on the output at the base point keeps the
/// loss near zero, so its rounding does not swamp small finite differences.
pub fn layer_loss(
    layer: &ConvLayer,
    tape: &mut Tape,
    p: &BTreeMap<String, Tensor>,
    weights: &Tensor,
    y0: &Tensor,
    train: bool,
) -> Result<Var> {
    let mut l = layer.clone();
    l.load_params(p)?;
    let x = tape.param("input", &p["input"])?;
    let y = l.forward(
        tape,
        x,
        &mut ForwardCtx {
            train,
            ..ForwardCtx::default()
        },
    )?;
    let y0 = tape.constant(y0.clone());
    let d = tape.sub(y, y0)?;
    let c = tape.constant(weights.clone());
    let m = tape.mul(d, c)?;
    tape.sum(m)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap()
}
