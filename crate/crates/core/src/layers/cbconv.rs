//! Circulant binary convolution.
//!
//! A layer maps `G` input feature maps to `H` output feature maps, each map
//! carrying `K` orientation channels (orientation fastest-varying in the
//! channel axis). There is one learned filter `W[h][g]` per pair. Output
//! channel `(h, j)` is
//!
//! ```text
//! out[h, j] = sum_g sum_c conv(b(in[g, c]), sign(rotate(W[h][g], j)))
//! ```
//!
//! where `b` is `sign` for binarized layers and the identity for the first
//! layer. Because the binarized sub-filter is shared by all `K` channels of
//! an input map, the inner sum over `c` is taken before convolving. This is
//! an exact algebraic rewrite that costs `1/K` of the naive layout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::binarize::SignFn;
use crate::circulant::CirculantSpec;
use crate::gemm::{gemm, MatRef};
use crate::tensor::{conv_output_side, Shape4, Tensor4};
use crate::{Error, Result};

#[derive(Debug, Clone)]
struct Cache {
    input: Tensor4,
    col: Vec<f64>,
    rotated: Vec<f64>,
    binarized: Vec<f64>,
    out_h: usize,
    out_w: usize,
}

#[derive(Debug, Clone)]
pub struct CBConvLayer {
    spec: CirculantSpec,
    in_maps: usize,
    out_maps: usize,
    stride: usize,
    pad: usize,
    binarize_input: bool,
    sign: SignFn,
    weights: Vec<f64>,
    grad: Vec<f64>,
    cache: Option<Cache>,
}

impl CBConvLayer {
    pub fn new(
        spec: CirculantSpec,
        in_maps: usize,
        out_maps: usize,
        stride: usize,
        pad: usize,
        binarize_input: bool,
        sign: SignFn,
    ) -> Result<Self> {
        if in_maps == 0 || out_maps == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "CBConv needs positive maps and stride, got in={in_maps} out={out_maps} stride={stride}"
            )));
        }
        let n = out_maps * in_maps * spec.plane_len();
        Ok(Self {
            spec,
            in_maps,
            out_maps,
            stride,
            pad,
            binarize_input,
            sign,
            weights: vec![0.0; n],
            grad: vec![0.0; n],
            cache: None,
        })
    }

    /// Uniform initialization in `[-b, b]`, `b = sqrt(6 / fan_in)`, where
    /// `fan_in = in_maps * H * H` counts only the learned filter.
    pub fn init_uniform(&mut self, rng: &mut impl Rng) {
        let bound = libm::sqrt(6.0 / self.fan_in() as f64);
        for w in &mut self.weights {
            *w = rng.gen_range(-bound..=bound);
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_maps * self.spec.plane_len()
    }

    pub fn spec(&self) -> &CirculantSpec {
        &self.spec
    }

    pub fn in_maps(&self) -> usize {
        self.in_maps
    }

    pub fn out_maps(&self) -> usize {
        self.out_maps
    }

    pub fn in_channels(&self) -> usize {
        self.in_maps * self.spec.k()
    }

    pub fn out_channels(&self) -> usize {
        self.out_maps * self.spec.k()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn binarize_input(&self) -> bool {
        self.binarize_input
    }

    pub fn sign_fn(&self) -> SignFn {
        self.sign
    }

    pub fn set_sign_fn(&mut self, sign: SignFn) {
        self.sign = sign;
    }

    /// Learned filters, `(out_map, in_map, H*H)` row-major.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    /// Weights and their accumulated gradient, borrowed together.
    pub fn params_grads_mut(&mut self) -> (&mut [f64], &[f64]) {
        (&mut self.weights, &self.grad)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn set_spec(&mut self, spec: CirculantSpec) -> Result<()> {
        if spec.k() != self.spec.k() || spec.filter_side() != self.spec.filter_side() {
            return Err(Error::Topology(format!(
                "spec K={} H={} does not match layer K={} H={}",
                spec.k(),
                spec.filter_side(),
                self.spec.k(),
                self.spec.filter_side()
            )));
        }
        self.spec = spec;
        Ok(())
    }

    /// Real-valued expanded filters as a `(H*K) x (G*H*H)` matrix: row
    /// `h*K + j`, column `g*H*H + cell` holds `rotate(W[h][g], j)[cell]`.
    fn rotated_matrix(&self) -> Vec<f64> {
        let k = self.spec.k();
        let len = self.spec.plane_len();
        let cols = self.in_maps * len;
        let mut m = vec![0.0; self.out_maps * k * cols];
        for h in 0..self.out_maps {
            for g in 0..self.in_maps {
                let w = &self.weights[(h * self.in_maps + g) * len..][..len];
                for j in 0..k {
                    let row = h * k + j;
                    self.spec.rotate_into(w, j, &mut m[row * cols + g * len..][..len]);
                }
            }
        }
        m
    }

    /// The full binarized CiF bank as a conventional kernel tensor of shape
    /// `(H*K, G*K, H, H)`, every input channel of a map carrying the same
    /// sub-filter.
    pub fn binarized_kernel(&self) -> Tensor4 {
        let k = self.spec.k();
        let side = self.spec.filter_side();
        let len = side * side;
        let rotated = self.rotated_matrix();
        let cols = self.in_maps * len;
        let shape = Shape4::new(self.out_channels(), self.in_channels(), side, side).expect("valid kernel shape");
        let mut t = Tensor4::zeros(shape);
        for r in 0..self.out_channels() {
            for g in 0..self.in_maps {
                let sub = &rotated[r * cols + g * len..][..len];
                for c in 0..k {
                    let dst = t.plane_mut(r, g * k + c);
                    for (d, &s) in dst.iter_mut().zip(sub) {
                        *d = self.sign.forward(s);
                    }
                }
            }
        }
        t
    }

    fn pad_value(&self) -> f64 {
        // binarized activations pad with -1 in every one of the K channels
        if self.binarize_input {
            -(self.spec.k() as f64)
        } else {
            0.0
        }
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c != self.in_channels() {
            return Err(Error::Geometry(format!(
                "CBConv expects {} input channels ({} maps x K={}), got {}",
                self.in_channels(),
                self.in_maps,
                self.spec.k(),
                input.c
            )));
        }
        let side = self.spec.filter_side();
        match (
            conv_output_side(input.h, side, self.stride, self.pad),
            conv_output_side(input.w, side, self.stride, self.pad),
        ) {
            (Some(h), Some(w)) => Shape4::new(input.n, self.out_channels(), h, w),
            _ => Err(Error::Geometry(format!(
                "output size < 1 for input {}x{}",
                input.h, input.w
            ))),
        }
    }

    pub fn forward(&mut self, input: &Tensor4) -> Result<Tensor4> {
        let out_shape = self.output_shape(input.shape())?;
        let is = input.shape();
        let k = self.spec.k();
        let side = self.spec.filter_side();
        let len = side * side;
        let (oh, ow) = (out_shape.h, out_shape.w);
        let plane = is.h * is.w;

        // channel-summed (and optionally binarized) input, (N, G, h, w)
        let mut summed = vec![0.0; is.n * self.in_maps * plane];
        for n in 0..is.n {
            for g in 0..self.in_maps {
                let dst = &mut summed[(n * self.in_maps + g) * plane..][..plane];
                for c in 0..k {
                    let src = input.plane(n, g * k + c);
                    if self.binarize_input {
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += self.sign.forward(s);
                        }
                    } else {
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }

        let col_rows = self.in_maps * len;
        let col_cols = is.n * oh * ow;
        let mut col = vec![0.0; col_rows * col_cols];
        let pad_value = self.pad_value();
        for g in 0..self.in_maps {
            for ky in 0..side {
                for kx in 0..side {
                    let row = &mut col[(g * len + ky * side + kx) * col_cols..][..col_cols];
                    let mut idx = 0;
                    for n in 0..is.n {
                        let src = &summed[(n * self.in_maps + g) * plane..][..plane];
                        for y in 0..oh {
                            let iy = (y * self.stride + ky) as isize - self.pad as isize;
                            for x in 0..ow {
                                let ix = (x * self.stride + kx) as isize - self.pad as isize;
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

        let rotated = self.rotated_matrix();
        let binarized: Vec<f64> = rotated.iter().map(|&v| self.sign.forward(v)).collect();
        let out_rows = self.out_channels();
        let mut out_mat = vec![0.0; out_rows * col_cols];
        gemm(
            1.0,
            MatRef::new(&binarized, out_rows, col_rows),
            MatRef::new(&col, col_rows, col_cols),
            0.0,
            &mut out_mat,
        );

        let spatial = oh * ow;
        let mut out = Tensor4::zeros(out_shape);
        for n in 0..is.n {
            for r in 0..out_rows {
                out.plane_mut(n, r)
                    .copy_from_slice(&out_mat[r * col_cols + n * spatial..][..spatial]);
            }
        }

        self.cache = Some(Cache {
            input: input.clone(),
            col,
            rotated,
            binarized,
            out_h: oh,
            out_w: ow,
        });
        Ok(out)
    }

    /// Accumulates learned-filter gradients and returns the input gradient.
    pub fn backward(&mut self, upstream: &Tensor4) -> Result<Tensor4> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache)?;
        let is = cache.input.shape();
        let (oh, ow) = (cache.out_h, cache.out_w);
        let expected = Shape4::new(is.n, self.out_channels(), oh, ow)?;
        if upstream.shape() != expected {
            return Err(Error::ShapeMismatch {
                left: upstream.shape().dims(),
                right: expected.dims(),
            });
        }
        let k = self.spec.k();
        let side = self.spec.filter_side();
        let len = side * side;
        let out_rows = self.out_channels();
        let col_rows = self.in_maps * len;
        let spatial = oh * ow;
        let col_cols = is.n * spatial;

        let mut d = vec![0.0; out_rows * col_cols];
        for n in 0..is.n {
            for r in 0..out_rows {
                d[r * col_cols + n * spatial..][..spatial].copy_from_slice(upstream.plane(n, r));
            }
        }

        // d loss / d binarized sub-filters, then through the weight sign
        let mut d_bin = vec![0.0; out_rows * col_rows];
        gemm(
            1.0,
            MatRef::new(&d, out_rows, col_cols),
            MatRef::new(&cache.col, col_rows, col_cols).t(),
            0.0,
            &mut d_bin,
        );
        for (g, &v) in d_bin.iter_mut().zip(&cache.rotated) {
            *g *= self.sign.derivative(v);
        }
        let mut planes = vec![0.0; k * len];
        for h in 0..self.out_maps {
            for g in 0..self.in_maps {
                for j in 0..k {
                    let row = h * k + j;
                    planes[j * len..][..len].copy_from_slice(&d_bin[row * col_rows + g * len..][..len]);
                }
                let dst = &mut self.grad[(h * self.in_maps + g) * len..][..len];
                self.spec.fold_into(&planes, dst);
            }
        }

        let mut d_col = vec![0.0; col_rows * col_cols];
        gemm(
            1.0,
            MatRef::new(&cache.binarized, out_rows, col_rows).t(),
            MatRef::new(&d, out_rows, col_cols),
            0.0,
            &mut d_col,
        );
        let plane = is.h * is.w;
        let mut d_summed = vec![0.0; is.n * self.in_maps * plane];
        for g in 0..self.in_maps {
            for ky in 0..side {
                for kx in 0..side {
                    let row = &d_col[(g * len + ky * side + kx) * col_cols..][..col_cols];
                    let mut idx = 0;
                    for n in 0..is.n {
                        let dst = &mut d_summed[(n * self.in_maps + g) * plane..][..plane];
                        for y in 0..oh {
                            let iy = (y * self.stride + ky) as isize - self.pad as isize;
                            for x in 0..ow {
                                let ix = (x * self.stride + kx) as isize - self.pad as isize;
                                if iy >= 0 && ix >= 0 && iy < is.h as isize && ix < is.w as isize {
                                    dst[iy as usize * is.w + ix as usize] += row[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }

        // fan-out over the K replicated channels
        let mut dx = Tensor4::zeros(is);
        for n in 0..is.n {
            for g in 0..self.in_maps {
                let src = &d_summed[(n * self.in_maps + g) * plane..][..plane];
                for c in 0..k {
                    let ch = g * k + c;
                    if self.binarize_input {
                        let pre = cache.input.plane(n, ch);
                        let dst = dx.plane_mut(n, ch);
                        for ((o, &s), &p) in dst.iter_mut().zip(src).zip(pre) {
                            *o = s * self.sign.derivative(p);
                        }
                    } else {
                        dx.plane_mut(n, ch).copy_from_slice(src);
                    }
                }
            }
        }
        Ok(dx)
    }
}
