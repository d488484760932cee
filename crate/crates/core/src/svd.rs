//! Thin singular value decomposition by one-sided Jacobi rotations.
//!
//! Columns of a working copy of the input are rotated pairwise until every
//! pair is orthogonal to within `CONVERGENCE_TOL` relative to the product of
//! their norms. The accumulated rotations form `v`; the column norms are the
//! singular values and the normalised columns form `u`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CONVERGENCE_TOL: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 60;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `rows × p`, orthonormal columns (`p = min(rows, cols)`).
    pub u: Tensor,
    /// Length `p`, non-negative, descending.
    pub s: Vec<f64>,
    /// `cols × p`, orthonormal columns.
    pub v: Tensor,
}

impl SvdResult {
    /// `u · diag(s) · vᵀ`.
    pub fn reconstruct(&self) -> Result<Tensor> {
        let us = self.u.transpose()?.scale_rows(&Tensor::new(vec![self.s.len()], self.s.clone())?)?;
        us.transpose()?.matmul(&self.v.transpose()?)
    }

    /// Number of singular values above `tol`.
    pub fn rank(&self, tol: f64) -> usize {
        self.s.iter().filter(|s| **s > tol).count()
    }
}

pub fn svd(m: &Tensor) -> Result<SvdResult> {
    if m.ndim() != 2 {
        return Err(Error::Rank {
            op: "svd",
            expected: 2,
            shape: m.shape().to_vec(),
        });
    }
    if m.rows() < m.cols() {
        let t = svd_tall(&m.transpose()?)?;
        return Ok(SvdResult { u: t.v, s: t.s, v: t.u });
    }
    svd_tall(m)
}

fn svd_tall(m: &Tensor) -> Result<SvdResult> {
    let (rows, cols) = (m.rows(), m.cols());
    // column-major working copies
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| m.get(&[i, j])).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = cols < 2;
    let mut worst = 0.0;
    for _ in 0..MAX_SWEEPS {
        worst = 0.0_f64;
        for i in 0..cols {
            for j in i + 1..cols {
                let (alpha, beta, gamma) = column_products(&a[i], &a[j]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(ratio);
                if ratio <= CONVERGENCE_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if worst <= CONVERGENCE_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual: worst,
        });
    }

    let norms: Vec<f64> = a.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|x, y| norms[*y].total_cmp(&norms[*x]).then(x.cmp(y)));

    let smax = norms.iter().cloned().fold(0.0, f64::max);
    let floor = smax * (rows.max(cols) as f64) * f64::EPSILON;
    let mut s = Vec::with_capacity(cols);
    let mut ucols: Vec<Option<Vec<f64>>> = Vec::with_capacity(cols);
    for &j in &order {
        let n = norms[j];
        if n > floor && n > 0.0 {
            s.push(n);
            ucols.push(Some(a[j].iter().map(|x| x / n).collect()));
        } else {
            s.push(0.0);
            ucols.push(None);
        }
    }
    let ucols = complete_orthonormal(ucols, rows);

    let mut u = Tensor::zeros(vec![rows, cols]);
    let mut vt = Tensor::zeros(vec![cols, cols]);
    for (k, &j) in order.iter().enumerate() {
        for i in 0..rows {
            u.set(&[i, k], ucols[k][i]);
        }
        for i in 0..cols {
            vt.set(&[i, k], v[j][i]);
        }
    }
    Ok(SvdResult { u, s, v: vt })
}

fn column_products(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (mut a, mut b, mut g) = (0.0, 0.0, 0.0);
    for (p, q) in x.iter().zip(y) {
        a += p * p;
        b += q * q;
        g += p * q;
    }
    (a, b, g)
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for (p, q) in ci.iter_mut().zip(cj.iter_mut()) {
        let (x, y) = (*p, *q);
        *p = c * x - s * y;
        *q = s * x + c * y;
    }
}

/// Fills missing columns with unit vectors orthogonal to all others
/// (Gram–Schmidt over the standard basis, two passes).
fn complete_orthonormal(cols: Vec<Option<Vec<f64>>>, dim: usize) -> Vec<Vec<f64>> {
    let mut done: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut out = Vec::with_capacity(cols.len());
    let mut basis = 0;
    for c in cols {
        match c {
            Some(c) => out.push(c),
            None => loop {
                assert!(basis < dim, "cannot complete orthonormal basis");
                let mut e = vec![0.0; dim];
                e[basis] = 1.0;
                basis += 1;
                for _ in 0..2 {
                    for d in &done {
                        let proj: f64 = e.iter().zip(d).map(|(x, y)| x * y).sum();
                        for (x, y) in e.iter_mut().zip(d) {
                            *x -= proj * y;
                        }
                    }
                }
                let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.5 {
                    let e: Vec<f64> = e.iter().map(|x| x / n).collect();
                    done.push(e.clone());
                    out.push(e);
                    break;
                }
            },
        }
    }
    out
}
