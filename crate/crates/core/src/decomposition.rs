//! Vanilla dynamic convolution seen as a static kernel plus an SVD-factored
//! residual, and the rank-1 expansions of both aggregation mechanisms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::svd::svd;
use crate::tensor::Tensor;

pub const ATTENTION_SUM_TOL: f64 = 1e-9;

/// `W_k = w0 + U_k S_k V_kᵀ` for every kernel, stored block-wise.
#[derive(Clone, Debug)]
pub struct DecomposedResidual {
    /// Average kernel, `r×c`.
    pub w0: Tensor,
    /// `r × K·p`, blocks `[U_1, …, U_K]`.
    pub u: Tensor,
    /// Length `K·p`, diagonal of `diag(S_1, …, S_K)`.
    pub s: Vec<f64>,
    /// `c × K·p`, blocks `[V_1, …, V_K]`.
    pub v: Tensor,
    pub k: usize,
}

impl DecomposedResidual {
    /// Singular values per kernel block.
    pub fn block_width(&self) -> usize {
        self.s.len() / self.k
    }

    /// `w0 + U_k S_k V_kᵀ`.
    pub fn kernel(&self, k: usize) -> Result<Tensor> {
        let mut pi = vec![0.0; self.k];
        pi[k] = 1.0;
        self.w0.add(&self.residual(&pi)?)
    }

    /// `U Π S Vᵀ` for one attention row, as a matrix product.
    pub fn residual(&self, pi: &[f64]) -> Result<Tensor> {
        if pi.len() != self.k {
            return Err(Error::ShapeMismatch {
                op: "aggregate_decomposed",
                left: vec![pi.len()],
                right: vec![self.k],
            });
        }
        let p = self.block_width();
        let weights: Vec<f64> = self.s.iter().enumerate().map(|(i, s)| pi[i / p] * s).collect();
        let us = self.u.transpose()?.scale_rows(&Tensor::new(vec![weights.len()], weights)?)?;
        us.transpose()?.matmul(&self.v.transpose()?)
    }
}

pub fn residual_decompose(kernels: &[Tensor]) -> Result<DecomposedResidual> {
    let first = kernels
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one kernel".into()))?;
    if first.ndim() != 2 {
        return Err(Error::Rank {
            op: "residual_decompose",
            expected: 2,
            shape: first.shape().to_vec(),
        });
    }
    let k = kernels.len();
    let mut sum = Tensor::zeros(first.shape().to_vec());
    for w in kernels {
        if w.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "residual_decompose",
                left: w.shape().to_vec(),
                right: first.shape().to_vec(),
            });
        }
        sum = sum.add(w)?;
    }
    let w0 = sum.scale(1.0 / k as f64)?;
    let (r, c) = (first.rows(), first.cols());
    let p = r.min(c);
    let mut u = Tensor::zeros(vec![r, k * p]);
    let mut v = Tensor::zeros(vec![c, k * p]);
    let mut s = Vec::with_capacity(k * p);
    for (b, w) in kernels.iter().enumerate() {
        let d = svd(&w.sub(&w0)?)?;
        for j in 0..p {
            for i in 0..r {
                u.set(&[i, b * p + j], d.u.get(&[i, j]));
            }
            for i in 0..c {
                v.set(&[i, b * p + j], d.v.get(&[i, j]));
            }
        }
        s.extend_from_slice(&d.s);
    }
    Ok(DecomposedResidual { w0, u, s, v, k })
}

fn check_attention(attention: &Tensor, k: usize) -> Result<()> {
    if attention.ndim() != 2 || attention.cols() != k {
        return Err(Error::ShapeMismatch {
            op: "aggregate_decomposed",
            left: attention.shape().to_vec(),
            right: vec![k],
        });
    }
    for (n, row) in attention.data().chunks(k).enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > ATTENTION_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "attention row {n} sums to {total}; the reformulation needs rows summing to 1"
            )));
        }
    }
    Ok(())
}

/// `W0 + U Π(x) S Vᵀ` per attention row, stacked `N×r×c`.
pub fn aggregate_decomposed(attention: &Tensor, d: &DecomposedResidual) -> Result<Tensor> {
    check_attention(attention, d.k)?;
    let mut data = Vec::with_capacity(attention.rows() * d.w0.numel());
    for row in attention.data().chunks(d.k) {
        data.extend_from_slice(d.w0.add(&d.residual(row)?)?.data());
    }
    let mut shape = vec![attention.rows()];
    shape.extend_from_slice(d.w0.shape());
    Tensor::new(shape, data)
}

/// `Σ_k π_k W_k` per attention row, stacked `N×r×c`.
pub fn aggregate_vanilla(attention: &Tensor, kernels: &[Tensor]) -> Result<Tensor> {
    let k = kernels.len();
    if k == 0 || attention.ndim() != 2 || attention.cols() != k {
        return Err(Error::ShapeMismatch {
            op: "aggregate_vanilla",
            left: attention.shape().to_vec(),
            right: vec![k],
        });
    }
    let shape0 = kernels[0].shape().to_vec();
    let mut data = Vec::with_capacity(attention.rows() * kernels[0].numel());
    for row in attention.data().chunks(k) {
        let mut acc = Tensor::zeros(shape0.clone());
        for (pi, w) in row.iter().zip(kernels) {
            acc = acc.add(&w.scale(*pi)?)?;
        }
        data.extend_from_slice(acc.data());
    }
    let mut shape = vec![attention.rows()];
    shape.extend(shape0);
    Tensor::new(shape, data)
}

/// Residual as an explicit sum of `K·p` outer products
/// `π_{⌈i/p⌉} · s_i · u_i v_iᵀ`.
pub fn rank1_expand(attention_row: &[f64], d: &DecomposedResidual) -> Result<Tensor> {
    if attention_row.len() != d.k {
        return Err(Error::ShapeMismatch {
            op: "rank1_expand",
            left: vec![attention_row.len()],
            right: vec![d.k],
        });
    }
    let (r, c) = (d.w0.rows(), d.w0.cols());
    let p = d.block_width();
    let mut out = vec![0.0; r * c];
    for (i, s) in d.s.iter().enumerate() {
        let coef = attention_row[i / p] * s;
        for a in 0..r {
            let ua = d.u.get(&[a, i]) * coef;
            for b in 0..c {
                out[a * c + b] += ua * d.v.get(&[b, i]);
            }
        }
    }
    Tensor::new(vec![r, c], out)
}

/// `Σ_i Σ_j p_i φ_ij q_jᵀ` as `L²` explicit outer products.
pub fn channel_fusion_rank1_expand(p: &Tensor, phi: &Tensor, q: &Tensor) -> Result<Tensor> {
    let l = phi.rows();
    if phi.cols() != l || p.cols() != l || q.cols() != l {
        return Err(Error::ShapeMismatch {
            op: "channel_fusion_rank1_expand",
            left: p.shape().to_vec(),
            right: phi.shape().to_vec(),
        });
    }
    let (r, c) = (p.rows(), q.rows());
    let mut out = vec![0.0; r * c];
    for i in 0..l {
        for j in 0..l {
            let f = phi.get(&[i, j]);
            for a in 0..r {
                let pa = p.get(&[a, i]) * f;
                for b in 0..c {
                    out[a * c + b] += pa * q.get(&[b, j]);
                }
            }
        }
    }
    Tensor::new(vec![r, c], out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MechanismRow {
    pub mechanism: &'static str,
    /// Largest residual rank observed over the trials.
    pub rank: usize,
    pub rank_bound: usize,
    pub term_count: usize,
    pub static_params: usize,
}

/// Numerical rank: singular values above `1e-10 · max(1, s_max)`.
pub fn numerical_rank(m: &Tensor) -> Result<usize> {
    let d = svd(m)?;
    let top = d.s.first().copied().unwrap_or(0.0).max(1.0);
    Ok(d.rank(1e-10 * top))
}

/// Side-by-side residual rank, rank-1 term count and static factor size of
/// shared-attention (vanilla) and channel-fusion aggregation on random
/// instances.
pub fn compare_aggregation_mechanisms(c: usize, k: usize, l: usize, trials: usize, seed: u64) -> Result<Vec<MechanismRow>> {
    if c == 0 || k == 0 || l == 0 || l > c {
        return Err(Error::InvalidArgument(format!("invalid dims C={c}, K={k}, L={l}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rand_t = |shape: Vec<usize>, rng: &mut ChaCha8Rng| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).expect("finite");
    let (mut rank_v, mut rank_d) = (0, 0);
    for _ in 0..trials {
        let kernels: Vec<Tensor> = (0..k).map(|_| rand_t(vec![c, c], &mut rng)).collect();
        let logits = rand_t(vec![1, k], &mut rng);
        let att = logits.softmax_rows(1.0)?;
        let d = residual_decompose(&kernels)?;
        rank_v = rank_v.max(numerical_rank(&d.residual(att.data())?)?);

        let p = rand_t(vec![c, l], &mut rng);
        let q = rand_t(vec![c, l], &mut rng);
        let phi = rand_t(vec![l, l], &mut rng);
        rank_d = rank_d.max(numerical_rank(&p.matmul(&phi.matmul(&q.transpose()?)?)?)?);
    }
    Ok(vec![
        MechanismRow {
            mechanism: "dynamic_attention",
            rank: rank_v,
            rank_bound: (k * c).min(c),
            term_count: k * c,
            static_params: 2 * k * c * c,
        },
        MechanismRow {
            mechanism: "dynamic_channel_fusion",
            rank: rank_d,
            rank_bound: l,
            term_count: l * l,
            static_params: 2 * c * l,
        },
    ])
}
