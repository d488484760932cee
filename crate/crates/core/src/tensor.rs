//! Dense row-major `f64` tensors and the deterministic kernels built on them.
//!
//! Every public operation validates shapes and rejects non-finite results, so
//! a `Tensor` that exists always holds finite scalars. Reductions run in a
//! fixed left-to-right order; two calls with the same inputs produce the same
//! bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and a row-major buffer.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::BufferLength { shape, len: data.len() });
        }
        Self::checked(shape, data, "new")
    }

    pub(crate) fn checked(shape: Vec<usize>, data: Vec<f64>, op: &'static str) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op, index: i });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor by evaluating `f` on every flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(f).collect();
        Self::checked(shape, data, "from_fn")
    }

    /// Builds a diagonal matrix from a vector.
    pub fn diag(values: &[f64]) -> Result<Self> {
        let n = values.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in values.iter().enumerate() {
            data[i * n + i] = *v;
        }
        Self::checked(vec![n, n], data, "diag")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the buffer. Callers are responsible for keeping the
    /// entries finite; optimizers use this for in-place updates.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} of extent {ext}");
            off = off * ext + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        assert!(value.is_finite());
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar { shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    fn expect_rank(&self, rank: usize, op: &'static str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::Rank {
                op,
                expected: rank,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }

    fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Tensor::checked(self.shape.clone(), data, op)
    }

    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data.iter().map(|v| f(*v)).collect();
        Tensor::checked(self.shape.clone(), data, op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        self.map("scale", |v| v * factor)
    }

    pub fn add_scalar(&self, value: f64) -> Result<Tensor> {
        self.map("add_scalar", |v| v + value)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.map("relu", |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn relu6(&self) -> Result<Tensor> {
        self.map("relu6", |v| v.clamp(0.0, 6.0))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.map("sigmoid", logistic)
    }

    /// Sum of all entries, accumulated in buffer order.
    pub fn sum(&self) -> f64 {
        let mut s = 0.0;
        for v in &self.data {
            s += v;
        }
        s
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut s = 0.0;
        for v in &self.data {
            s += v * v;
        }
        s.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Matrix product with a fixed left-to-right summation over the inner
    /// extent.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_rank(2, "matmul")?;
        other.expect_rank(2, "matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::checked(vec![m, n], out, "matmul")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.expect_rank(2, "transpose")?;
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Scales slice `i` along axis 0 by `factors[i]`, i.e. `diag(factors) · self`
    /// for matrices and the same along the leading mode for higher ranks.
    pub fn scale_rows(&self, factors: &Tensor) -> Result<Tensor> {
        if self.ndim() == 0 || factors.numel() != self.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: self.shape.clone(),
                right: factors.shape.clone(),
            });
        }
        let inner = self.numel() / self.shape[0].max(1);
        let mut out = self.data.clone();
        for (i, f) in factors.data.iter().enumerate() {
            for v in &mut out[i * inner..(i + 1) * inner] {
                *v *= f;
            }
        }
        Tensor::checked(self.shape.clone(), out, "scale_rows")
    }

    /// Rows `start..end` along axis 0.
    pub fn slice0(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.ndim() == 0 || start > end || end > self.shape[0] {
            return Err(Error::InvalidArgument(format!(
                "slice0 {start}..{end} out of range for shape {:?}",
                self.shape
            )));
        }
        let inner = self.numel() / self.shape[0].max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        self.expect_rank(2, "slice_cols")?;
        let (r, c) = (self.shape[0], self.shape[1]);
        if start > end || end > c {
            return Err(Error::InvalidArgument(format!(
                "slice_cols {start}..{end} out of range for {c} columns"
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Ok(Tensor {
            shape: vec![r, w],
            data: out,
        })
    }

    /// Concatenates along axis 0; all trailing extents must agree.
    pub fn concat0(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat0 of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.ndim() != first.ndim() || &p.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat0",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }

    /// `⊕ blocks`: block-diagonal matrix with the given blocks on the diagonal.
    pub fn block_diag(blocks: &[&Tensor]) -> Result<Tensor> {
        let mut rows = 0;
        let mut cols = 0;
        for b in blocks {
            b.expect_rank(2, "block_diag")?;
            rows += b.shape[0];
            cols += b.shape[1];
        }
        let mut out = vec![0.0; rows * cols];
        let (mut r0, mut c0) = (0, 0);
        for b in blocks {
            let (br, bc) = (b.shape[0], b.shape[1]);
            for i in 0..br {
                out[(r0 + i) * cols + c0..(r0 + i) * cols + c0 + bc].copy_from_slice(&b.data[i * bc..(i + 1) * bc]);
            }
            r0 += br;
            c0 += bc;
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data: out,
        })
    }

    /// Adds `bias[j]` to column `j` of every row of a matrix.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        self.expect_rank(2, "add_row_bias")?;
        let c = self.shape[1];
        if bias.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Tensor::checked(self.shape.clone(), out, "add_row_bias")
    }

    /// Adds a per-channel bias to an `N×C×…` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if self.ndim() < 2 || bias.numel() != self.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let (n, c) = (self.shape[0], self.shape[1]);
        let spatial = self.numel() / (n * c).max(1);
        let mut out = self.data.clone();
        for s in 0..n {
            for ch in 0..c {
                let b = bias.data[ch];
                let base = (s * c + ch) * spatial;
                for v in &mut out[base..base + spatial] {
                    *v += b;
                }
            }
        }
        Tensor::checked(self.shape.clone(), out, "add_channel_bias")
    }

    /// Channel mean over spatial positions: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        self.expect_rank(4, "global_avg_pool")?;
        let (n, c, h, w) = dims4(&self.shape);
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("global_avg_pool on empty map".into()));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c);
        for plane in self.data.chunks(hw) {
            let mut s = 0.0;
            for v in plane {
                s += v;
            }
            out.push(s / hw as f64);
        }
        Tensor::checked(vec![n, c], out, "global_avg_pool")
    }

    /// Row-wise softmax of `logits / temperature` with max subtraction.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        self.expect_rank(2, "softmax")?;
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let k = self.shape[1];
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data.chunks(k) {
            let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
            let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scaled.iter().map(|v| (v - m).exp()).collect();
            let mut z = 0.0;
            for e in &exps {
                z += e;
            }
            out.extend(exps.iter().map(|e| e / z));
        }
        Tensor::checked(self.shape.clone(), out, "softmax")
    }

    /// Mode-`axis` product `self ×_axis m` for a matrix `m` of shape
    /// `p × extent(axis)`. Axis 0 is the first mode.
    pub fn mode_n_product(&self, m: &Tensor, axis: usize) -> Result<Tensor> {
        m.expect_rank(2, "mode_n_product")?;
        if axis >= self.ndim() {
            return Err(Error::InvalidArgument(format!(
                "mode {axis} out of range for rank-{} tensor",
                self.ndim()
            )));
        }
        let ext = self.shape[axis];
        if m.shape[1] != ext {
            return Err(Error::ShapeMismatch {
                op: "mode_n_product",
                left: self.shape.clone(),
                right: m.shape.clone(),
            });
        }
        let p = m.shape[0];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * p * inner];
        for o in 0..outer {
            for r in 0..p {
                let dst = &mut out[(o * p + r) * inner..(o * p + r + 1) * inner];
                for e in 0..ext {
                    let coef = m.data[r * ext + e];
                    let src = &self.data[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += coef * s;
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = p;
        Tensor::checked(shape, out, "mode_n_product")
    }
}

pub(crate) fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

/// Attention normalisation used by vanilla dynamic convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Softmax,
    Sigmoid,
}

/// Softmax over `logits / temperature`, or an entrywise logistic that ignores
/// the temperature.
pub fn attention_activation(logits: &Tensor, mode: AttentionMode, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "attention temperature must be positive, got {temperature}"
        )));
    }
    match mode {
        AttentionMode::Softmax => logits.softmax_rows(temperature),
        AttentionMode::Sigmoid => logits.sigmoid(),
    }
}

/// Geometry of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dGeom {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride, padding, groups }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cg_in: usize,
    cg_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(x: &[usize], w: &[usize], g: Conv2dGeom) -> Result<ConvDims> {
    let mismatch = || Error::ShapeMismatch {
        op: "conv2d",
        left: x.to_vec(),
        right: w.to_vec(),
    };
    if x.len() != 4 || w.len() != 4 || g.groups == 0 {
        return Err(mismatch());
    }
    let (n, c_in, h, wd) = dims4(x);
    let (c_out, cg_in, kh, kw) = dims4(w);
    if c_in % g.groups != 0 || c_out % g.groups != 0 || c_in / g.groups != cg_in {
        return Err(mismatch());
    }
    let oh = g.output_extent(h, kh).ok_or_else(mismatch)?;
    let ow = g.output_extent(wd, kw).ok_or_else(mismatch)?;
    Ok(ConvDims {
        n,
        c_in,
        h,
        w: wd,
        c_out,
        cg_in,
        cg_out: c_out / g.groups,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Output rows `[lo, hi)` whose receptive tap `ky` lands inside the input.
fn valid_range(out: usize, inp: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    // input index = o*stride + tap - pad must lie in [0, inp)
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if inp + pad > tap {
        ((inp + pad - tap - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Grouped 2-d cross-correlation with zero padding.
///
/// `x`: `N×C_in×H×W`, `w`: `C_out×(C_in/groups)×kh×kw`. For every output
/// element the accumulation runs over input channel, then kernel row, then
/// kernel column, in ascending order.
pub fn conv2d(x: &Tensor, w: &Tensor, geom: Conv2dGeom) -> Result<Tensor> {
    let d = conv_dims(&x.shape, &w.shape, geom)?;
    let (s, p) = (geom.stride, geom.padding);
    let mut out = vec![0.0; d.n * d.c_out * d.oh * d.ow];
    for n in 0..d.n {
        for o in 0..d.c_out {
            let g = o / d.cg_out;
            let dst = &mut out[(n * d.c_out + o) * d.oh * d.ow..(n * d.c_out + o + 1) * d.oh * d.ow];
            for ci in 0..d.cg_in {
                let c = g * d.cg_in + ci;
                let src = &x.data[(n * d.c_in + c) * d.h * d.w..(n * d.c_in + c + 1) * d.h * d.w];
                for ky in 0..d.kh {
                    let (y0, y1) = valid_range(d.oh, d.h, ky, s, p);
                    for kx in 0..d.kw {
                        let wv = w.data[((o * d.cg_in + ci) * d.kh + ky) * d.kw + kx];
                        let (x0, x1) = valid_range(d.ow, d.w, kx, s, p);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let row = &src[iy * d.w..(iy + 1) * d.w];
                            let drow = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                            if s == 1 {
                                let src = &row[x0 + kx - p..x1 + kx - p];
                                for (a, b) in drow[x0..x1].iter_mut().zip(src) {
                                    *a += wv * b;
                                }
                            } else {
                                for ox in x0..x1 {
                                    drow[ox] += wv * row[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::checked(vec![d.n, d.c_out, d.oh, d.ow], out, "conv2d")
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(grad_out: &Tensor, w: &Tensor, input_shape: &[usize], geom: Conv2dGeom) -> Result<Tensor> {
    let d = conv_dims(input_shape, &w.shape, geom)?;
    if grad_out.shape != [d.n, d.c_out, d.oh, d.ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_grad_input",
            left: grad_out.shape.clone(),
            right: vec![d.n, d.c_out, d.oh, d.ow],
        });
    }
    let (s, p) = (geom.stride, geom.padding);
    let mut gx = vec![0.0; d.n * d.c_in * d.h * d.w];
    for n in 0..d.n {
        for o in 0..d.c_out {
            let g = o / d.cg_out;
            let go = &grad_out.data[(n * d.c_out + o) * d.oh * d.ow..(n * d.c_out + o + 1) * d.oh * d.ow];
            for ci in 0..d.cg_in {
                let c = g * d.cg_in + ci;
                let dst = &mut gx[(n * d.c_in + c) * d.h * d.w..(n * d.c_in + c + 1) * d.h * d.w];
                for ky in 0..d.kh {
                    let (y0, y1) = valid_range(d.oh, d.h, ky, s, p);
                    for kx in 0..d.kw {
                        let wv = w.data[((o * d.cg_in + ci) * d.kh + ky) * d.kw + kx];
                        let (x0, x1) = valid_range(d.ow, d.w, kx, s, p);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            if s == 1 {
                                let drow = &mut dst[iy * d.w + x0 + kx - p..iy * d.w + x1 + kx - p];
                                for (a, b) in drow.iter_mut().zip(&go[oy * d.ow + x0..oy * d.ow + x1]) {
                                    *a += wv * b;
                                }
                            } else {
                                for ox in x0..x1 {
                                    dst[iy * d.w + ox * s + kx - p] += wv * go[oy * d.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::checked(input_shape.to_vec(), gx, "conv2d_grad_input")
}

/// Gradient of [`conv2d`] with respect to its weight.
pub fn conv2d_grad_weight(grad_out: &Tensor, x: &Tensor, weight_shape: &[usize], geom: Conv2dGeom) -> Result<Tensor> {
    let d = conv_dims(&x.shape, weight_shape, geom)?;
    if grad_out.shape != [d.n, d.c_out, d.oh, d.ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_grad_weight",
            left: grad_out.shape.clone(),
            right: vec![d.n, d.c_out, d.oh, d.ow],
        });
    }
    let (s, p) = (geom.stride, geom.padding);
    let mut gw = vec![0.0; weight_shape.iter().product()];
    for n in 0..d.n {
        for o in 0..d.c_out {
            let g = o / d.cg_out;
            let go = &grad_out.data[(n * d.c_out + o) * d.oh * d.ow..(n * d.c_out + o + 1) * d.oh * d.ow];
            for ci in 0..d.cg_in {
                let c = g * d.cg_in + ci;
                let src = &x.data[(n * d.c_in + c) * d.h * d.w..(n * d.c_in + c + 1) * d.h * d.w];
                for ky in 0..d.kh {
                    let (y0, y1) = valid_range(d.oh, d.h, ky, s, p);
                    for kx in 0..d.kw {
                        let (x0, x1) = valid_range(d.ow, d.w, kx, s, p);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            if s == 1 {
                                let a = &go[oy * d.ow + x0..oy * d.ow + x1];
                                let b = &src[iy * d.w + x0 + kx - p..iy * d.w + x1 + kx - p];
                                for (u, v) in a.iter().zip(b) {
                                    acc += u * v;
                                }
                            } else {
                                for ox in x0..x1 {
                                    acc += go[oy * d.ow + ox] * src[iy * d.w + ox * s + kx - p];
                                }
                            }
                        }
                        gw[((o * d.cg_in + ci) * d.kh + ky) * d.kw + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::checked(weight_shape.to_vec(), gw, "conv2d_grad_weight")
}

/// Max pooling over `k×k` windows; padded positions never win. Returns the
/// pooled map and, per output element, the flat input index it copied.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, padding: usize) -> Result<(Tensor, Vec<usize>)> {
    if x.ndim() != 4 || k == 0 || padding >= k {
        return Err(Error::Rank {
            op: "max_pool2d",
            expected: 4,
            shape: x.shape.clone(),
        });
    }
    let (n, c, h, w) = dims4(&x.shape);
    let geom = Conv2dGeom::new(stride, padding, 1);
    let bad = || Error::ShapeMismatch {
        op: "max_pool2d",
        left: x.shape.clone(),
        right: vec![k, k],
    };
    let oh = geom.output_extent(h, k).ok_or_else(bad)?;
    let ow = geom.output_extent(w, k).ok_or_else(bad)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if x.data[idx] > best {
                            best = x.data[idx];
                            at = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(at);
            }
        }
    }
    Ok((Tensor::checked(vec![n, c, oh, ow], out, "max_pool2d")?, arg))
}

/// Per-channel statistics of an `N×C×…` tensor: biased mean and variance
/// over every axis except 1.
pub fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.ndim() < 2 {
        return Err(Error::Rank {
            op: "channel_stats",
            expected: 2,
            shape: x.shape.clone(),
        });
    }
    let (n, c) = (x.shape[0], x.shape[1]);
    let spatial = x.numel() / (n * c).max(1);
    let count = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            for v in &x.data[(b * c + ch) * spatial..(b * c + ch + 1) * spatial] {
                s += v;
            }
        }
        let m = s / count;
        let mut ss = 0.0;
        for b in 0..n {
            for v in &x.data[(b * c + ch) * spatial..(b * c + ch + 1) * spatial] {
                ss += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = ss / count;
    }
    Ok((mean, var))
}

/// Normalises each channel with the given statistics and applies the affine
/// `gamma`, `beta`. Returns the output and the pre-affine normalised values.
pub fn batch_norm_apply(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f64], var: &[f64], eps: f64) -> Result<(Tensor, Tensor)> {
    if x.ndim() < 2 || gamma.numel() != x.shape[1] || beta.numel() != x.shape[1] || mean.len() != x.shape[1] {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            left: x.shape.clone(),
            right: gamma.shape.clone(),
        });
    }
    let (n, c) = (x.shape[0], x.shape[1]);
    let spatial = x.numel() / (n * c).max(1);
    let mut xhat = vec![0.0; x.numel()];
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let base = (b * c + ch) * spatial;
            for i in base..base + spatial {
                let h = (x.data[i] - mean[ch]) * inv;
                xhat[i] = h;
                out[i] = gamma.data[ch] * h + beta.data[ch];
            }
        }
    }
    Ok((
        Tensor::checked(x.shape.clone(), out, "batch_norm")?,
        Tensor::checked(x.shape.clone(), xhat, "batch_norm")?,
    ))
}
