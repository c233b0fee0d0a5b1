//! Dense rank-4 tensors in row-major `(n, c, h, w)` order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::gemm::{gemm, MatRef};
use crate::{Error, Result};

/// Batch x channel x height x width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let dims = [n, c, h, w];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(dims));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::ShapeOverflow(dims))?;
        Ok(Self { n, c, h, w })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one `(h, w)` plane.
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one sample (`c * h * w`).
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn flatten(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn unflatten(&self, index: usize) -> [usize; 4] {
        let w = index % self.w;
        let rest = index / self.w;
        let h = rest % self.h;
        let rest = rest / self.h;
        let c = rest % self.c;
        [rest / self.c, c, h, w]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a tensor from external data, rejecting NaN and infinities.
    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Self::from_vec_unchecked(shape, data)
    }

    /// Like [`Tensor4::from_vec`] but skips the finiteness scan. Length is
    /// still checked.
    pub fn from_vec_unchecked(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.flatten(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.shape.flatten(n, c, h, w);
        &mut self.data[i]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let start = self.shape.flatten(n, c, 0, 0);
        &self.data[start..start + self.shape.plane_len()]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let start = self.shape.flatten(n, c, 0, 0);
        let len = self.shape.plane_len();
        &mut self.data[start..start + len]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Reinterprets the flat buffer under a new shape of equal size.
    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::from_vec_unchecked(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|x| x * factor)
    }

    /// `self += other`, shape checked.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.dims(),
                right: other.shape.dims(),
            });
        }
        Ok(())
    }
}

/// Output side of a convolution, or `None` if the window does not fit.
pub fn conv_output_side(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn conv_shape(input: &Tensor4, kernel: &Tensor4, stride: usize, pad: usize) -> Result<Shape4> {
    let is = input.shape();
    let ks = kernel.shape();
    if ks.h != ks.w || ks.h % 2 == 0 {
        return Err(Error::Geometry(format!(
            "kernel must be square with odd side, got {}x{}",
            ks.h, ks.w
        )));
    }
    if ks.c != is.c {
        return Err(Error::Geometry(format!(
            "kernel expects {} input channels, input has {}",
            ks.c, is.c
        )));
    }
    match (
        conv_output_side(is.h, ks.h, stride, pad),
        conv_output_side(is.w, ks.w, stride, pad),
    ) {
        (Some(h), Some(w)) => Shape4::new(is.n, ks.n, h, w),
        _ => Err(Error::Geometry(format!(
            "output size < 1 for input {}x{}, kernel {}, stride {stride}, pad {pad}",
            is.h, is.w, ks.h
        ))),
    }
}

/// Cross-correlation (no kernel flip) with zero padding.
///
/// `kernel` has shape `(out_channels, in_channels, H, H)`.
pub fn conv2d_valid(input: &Tensor4, kernel: &Tensor4, stride: usize, pad: usize) -> Result<Tensor4> {
    conv2d(input, kernel, stride, pad, 0.0)
}

/// Cross-correlation where every padded cell reads as `pad_value`.
///
/// This is the direct loop implementation used as the reference for the
/// faster paths.
pub fn conv2d(
    input: &Tensor4,
    kernel: &Tensor4,
    stride: usize,
    pad: usize,
    pad_value: f64,
) -> Result<Tensor4> {
    let is = input.shape();
    let ks = kernel.shape();
    let out_shape = conv_shape(input, kernel, stride, pad)?;
    let (oh, ow) = (out_shape.h, out_shape.w);
    let mut out = Tensor4::zeros(out_shape);
    for n in 0..is.n {
        for o in 0..ks.n {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..is.c {
                        for ky in 0..ks.h {
                            for kx in 0..ks.w {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x * stride + kx) as isize - pad as isize;
                                let v = if iy < 0 || ix < 0 || iy >= is.h as isize || ix >= is.w as isize {
                                    pad_value
                                } else {
                                    input.at(n, c, iy as usize, ix as usize)
                                };
                                acc += v * kernel.at(o, c, ky, kx);
                            }
                        }
                    }
                    *out.at_mut(n, o, y, x) = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Same result as [`conv2d`] computed as an im2col matrix times the
/// flattened kernel.
pub fn conv2d_im2col(
    input: &Tensor4,
    kernel: &Tensor4,
    stride: usize,
    pad: usize,
    pad_value: f64,
) -> Result<Tensor4> {
    let is = input.shape();
    let ks = kernel.shape();
    let out_shape = conv_shape(input, kernel, stride, pad)?;
    let (oh, ow) = (out_shape.h, out_shape.w);
    let spatial = oh * ow;
    let rows = is.c * ks.h * ks.w;
    let cols = is.n * spatial;
    let mut col = vec![0.0; rows * cols];
    for c in 0..is.c {
        for ky in 0..ks.h {
            for kx in 0..ks.w {
                let row = &mut col[((c * ks.h + ky) * ks.w + kx) * cols..][..cols];
                let mut idx = 0;
                for n in 0..is.n {
                    let src = input.plane(n, c);
                    for y in 0..oh {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        for x in 0..ow {
                            let ix = (x * stride + kx) as isize - pad as isize;
                            row[idx] = if iy < 0 || ix < 0 || iy >= is.h as isize || ix >= is.w as isize {
                                pad_value
                            } else {
                                src[iy as usize * is.w + ix as usize]
                            };
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    let mut out_mat = vec![0.0; ks.n * cols];
    gemm(
        1.0,
        MatRef::new(kernel.data(), ks.n, rows),
        MatRef::new(&col, rows, cols),
        0.0,
        &mut out_mat,
    );
    let mut out = Tensor4::zeros(out_shape);
    for n in 0..is.n {
        for o in 0..ks.n {
            out.plane_mut(n, o).copy_from_slice(&out_mat[o * cols + n * spatial..][..spatial]);
        }
    }
    Ok(out)
}
