use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latent sizes of a DCD layer: `l` channels and `l_k` kernel elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentDims {
    pub l: usize,
    pub l_k: usize,
}

/// Largest member of the halving chain `c, c/2, c/4, …` with `L² ≤ c`.
///
/// The boundary is inclusive so perfect squares map to their root (64 → 8).
pub fn default_latent_dim(c: usize) -> usize {
    let mut l = c.max(1);
    while l * l > c.max(1) {
        l /= 2;
    }
    l
}

/// `floor(mult · l)`, never below one.
pub fn scaled_latent_dim(l: usize, mult: f64) -> usize {
    ((l as f64 * mult).floor() as usize).max(1)
}

/// Default latent sizes of the joint k×k form: `L_k = ⌊k²/2⌋` and `L` from the
/// halving rule on `c / L_k`.
pub fn default_latent_dims_kxk(c: usize, k: usize) -> Result<LatentDims> {
    if k < 2 || k % 2 == 0 {
        return Err(Error::LatentConstraint(format!(
            "k×k latent dims need an odd kernel size of at least 3, got {k}; use the 1×1 form for k=1"
        )));
    }
    let l_k = k * k / 2;
    let per = c / l_k;
    if per == 0 {
        return Err(Error::LatentConstraint(format!("{c} channels is too few for L_k={l_k}")));
    }
    let dims = LatentDims {
        l: default_latent_dim(per),
        l_k,
    };
    check_kxk(dims, c, k)?;
    Ok(dims)
}

pub(crate) fn check_kxk(d: LatentDims, c: usize, k: usize) -> Result<()> {
    if d.l == 0 || d.l_k == 0 || d.l_k >= k * k || d.l * d.l * d.l_k > c {
        return Err(Error::LatentConstraint(format!(
            "L={}, L_k={} violates L_k < k² and L²·L_k ≤ C for C={c}, k={k}",
            d.l, d.l_k
        )));
    }
    Ok(())
}
