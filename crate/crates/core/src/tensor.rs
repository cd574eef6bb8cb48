//! Dense row-major `f64` tensors and the kernels the rest of the crate is
//! built from.
//!
//! No views or strides: every operation returns a fresh tensor. Matrix
//! products parallelize over output rows only, so each output element is
//! reduced in a fixed order and results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work size (m·k·n) above which matrix products fan out over rows.
const PAR_THRESHOLD: usize = 1 << 18;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Build from nested rows; panics on ragged input. Intended for tests and
    /// small literals.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix literal");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Leading-axis slab `i` as a flat slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Rows `idx` of the leading axis, gathered into a new tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let stride = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "elementwise op")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn abs(&self) -> Tensor {
        self.map(f64::abs)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{context}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    /// Elementwise sign with `sign(0) = 0`. NaN is rejected.
    pub fn sign(&self) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.data.len());
        for (i, &v) in self.data.iter().enumerate() {
            data.push(sign_scalar(v).ok_or_else(|| {
                Error::Numeric(format!("sign of NaN at flat index {i}"))
            })?);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul lhs")?;
        let (k2, n) = other.as_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul {:?} x {:?}: inner extents differ",
                self.shape, other.shape
            )));
        }
        let a = &self.data;
        let b = &other.data;
        let row = |i: usize, out: &mut [f64]| {
            let a_row = &a[i * k..(i + 1) * k];
            for (kk, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b_row = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in out.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        };
        let mut data = vec![0.0; m * n];
        if m * k * n >= PAR_THRESHOLD {
            data.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out)| row(i, out));
        } else {
            data.chunks_mut(n).enumerate().for_each(|(i, out)| row(i, out));
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.as_matrix("matmul_tn lhs")?;
        let (k2, n) = other.as_matrix("matmul_tn rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_tn {:?}ᵀ x {:?}: leading extents differ",
                self.shape, other.shape
            )));
        }
        let a = &self.data;
        let b = &other.data;
        let row = |i: usize, out: &mut [f64]| {
            for kk in 0..k {
                let av = a[kk * m + i];
                if av == 0.0 {
                    continue;
                }
                let b_row = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in out.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        };
        let mut data = vec![0.0; m * n];
        if m * k * n >= PAR_THRESHOLD {
            data.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out)| row(i, out));
        } else {
            data.chunks_mut(n).enumerate().for_each(|(i, out)| row(i, out));
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul_nt lhs")?;
        let (n, k2) = other.as_matrix("matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt {:?} x {:?}ᵀ: trailing extents differ",
                self.shape, other.shape
            )));
        }
        let a = &self.data;
        let b = &other.data;
        let row = |i: usize, out: &mut [f64]| {
            let a_row = &a[i * k..(i + 1) * k];
            for (j, o) in out.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            }
        };
        let mut data = vec![0.0; m * n];
        if m * k * n >= PAR_THRESHOLD {
            data.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out)| row(i, out));
        } else {
            data.chunks_mut(n).enumerate().for_each(|(i, out)| row(i, out));
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    /// Softmax over the last axis of `self / tau`, stabilized by subtracting
    /// each slice's maximum.
    pub fn softmax_temp(&self, tau: f64) -> Result<Tensor> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        let k = *self.shape.last().expect("tensor has at least one axis");
        let mut data = self.data.clone();
        for slice in data.chunks_mut(k) {
            softmax_slice(slice, tau);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub(crate) fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(Error::Dimension(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// `None` for NaN.
pub fn sign_scalar(v: f64) -> Option<f64> {
    if v > 0.0 {
        Some(1.0)
    } else if v < 0.0 {
        Some(-1.0)
    } else if v == 0.0 {
        Some(0.0)
    } else {
        None
    }
}

/// In-place temperature softmax of one slice.
pub(crate) fn softmax_slice(slice: &mut [f64], tau: f64) {
    let max = slice.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for v in slice.iter_mut() {
        *v = ((*v - max) / tau).exp();
        total += *v;
    }
    for v in slice.iter_mut() {
        *v /= total;
    }
}

/// Kernel geometry shared by convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::Parameter(format!(
                "kernel {kh}x{kw} and stride {stride} must be at least 1"
            )));
        }
        Ok(Self { kh, kw, stride, pad })
    }

    /// Output spatial extents for an `h × w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if self.kh > ph || self.kw > pw {
            return Err(Error::Shape(format!(
                "kernel {}x{} larger than padded input {ph}x{pw}",
                self.kh, self.kw
            )));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

/// Unroll receptive fields of a `C×H×W` input into a `(C·kh·kw) × P` matrix.
///
/// Row `c·kh·kw + i·kw + j` holds kernel tap `(c, i, j)`; column `p` is the
/// output position `oy·out_w + ox`. Taps outside the image read as zero.
pub fn im2col(input: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let (c, h, w) = chw(input)?;
    let (oh, ow) = geom.output_dims(h, w)?;
    let p = oh * ow;
    let rows = c * geom.kh * geom.kw;
    let mut out = vec![0.0; rows * p];
    let x = input.data();
    for ch in 0..c {
        for i in 0..geom.kh {
            for j in 0..geom.kw {
                let r = (ch * geom.kh + i) * geom.kw + j;
                let out_row = &mut out[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + i) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + j) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * ow + ox] = x[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows, p], out)
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `C×H×W` image.
pub fn col2im(cols: &Tensor, c: usize, h: usize, w: usize, geom: ConvGeometry) -> Result<Tensor> {
    let (oh, ow) = geom.output_dims(h, w)?;
    let p = oh * ow;
    let rows = c * geom.kh * geom.kw;
    if cols.shape() != [rows, p] {
        return Err(Error::Dimension(format!(
            "col2im expects [{rows}, {p}], got {:?}",
            cols.shape()
        )));
    }
    let mut img = vec![0.0; c * h * w];
    let src = cols.data();
    for ch in 0..c {
        for i in 0..geom.kh {
            for j in 0..geom.kw {
                let r = (ch * geom.kh + i) * geom.kw + j;
                let col_row = &src[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + i) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + j) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[(ch * h + iy as usize) * w + ix as usize] += col_row[oy * ow + ox];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], img)
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::Dimension(format!("expected C×H×W input, got {s:?}"))),
    }
}
