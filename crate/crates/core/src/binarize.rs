//! Sign binarization, the Gaussian straight-through gradient, bit packing
//! and the XNOR/popcount convolution.
//!
//! Bit convention for packed tensors: bit value 1 encodes `+1`, bit value 0
//! encodes `-1`. Elements are packed in flat row-major `(n, c, h, w)` order
//! into `u64` words, lowest bit first: flat index `i` lives in word `i / 64`
//! at bit `i % 64`. Unused tail bits of the last word are zero.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{conv_output_side, Shape4, Tensor4};
use crate::{Error, Result};

pub const WORD_BITS: usize = 64;

/// `sign` with the tie `sign(0) = +1`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Amplitude and width of the Gaussian used as the derivative of `sign`:
/// `d sign(x)/dx ~ A / (sigma sqrt(pi)) * exp(-x^2 / sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignSurrogate {
    pub amplitude: f64,
    pub sigma: f64,
}

impl Default for SignSurrogate {
    fn default() -> Self {
        Self {
            amplitude: 3.0 * libm::sqrt(2.0 * core::f64::consts::PI),
            sigma: 1.0,
        }
    }
}

impl SignSurrogate {
    pub fn new(amplitude: f64, sigma: f64) -> Result<Self> {
        if !(amplitude > 0.0 && amplitude.is_finite()) || !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sign surrogate needs amplitude > 0 and sigma > 0, got A={amplitude}, sigma={sigma}"
            )));
        }
        Ok(Self { amplitude, sigma })
    }

    #[inline]
    pub fn gradient(&self, x: f64) -> f64 {
        let z = x / self.sigma;
        self.amplitude / (self.sigma * libm::sqrt(core::f64::consts::PI)) * libm::exp(-z * z)
    }

    /// `(A/2) erf(x / sigma)`, whose derivative is exactly [`Self::gradient`].
    #[inline]
    pub fn smooth(&self, x: f64) -> f64 {
        0.5 * self.amplitude * libm::erf(x / self.sigma)
    }
}

/// How a binarization point behaves in forward and backward.
#[derive(Debug, Clone, Copy)]
pub enum SignFn {
    /// `sign` forward, Gaussian surrogate backward.
    Gaussian(SignSurrogate),
    /// `sign` forward, caller-supplied surrogate derivative backward.
    Custom(fn(f64) -> f64),
    /// `(A/2) erf(x/sigma)` forward with its exact derivative backward.
    /// Makes the network smooth for finite-difference checks.
    Smooth(SignSurrogate),
}

impl Default for SignFn {
    fn default() -> Self {
        SignFn::Gaussian(SignSurrogate::default())
    }
}

impl SignFn {
    #[inline]
    pub fn forward(&self, x: f64) -> f64 {
        match self {
            SignFn::Smooth(s) => s.smooth(x),
            _ => sign(x),
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            SignFn::Gaussian(s) | SignFn::Smooth(s) => s.gradient(x),
            SignFn::Custom(f) => f(x),
        }
    }

    /// True when forward produces exactly `+-1`.
    pub fn is_binary(&self) -> bool {
        !matches!(self, SignFn::Smooth(_))
    }
}

pub fn sign_forward(x: &Tensor4) -> Tensor4 {
    x.map(sign)
}

/// Gradient of `sign` through the Gaussian surrogate.
pub fn sign_backward(upstream: &Tensor4, pre_activation: &Tensor4, s: &SignSurrogate) -> Result<Tensor4> {
    upstream.zip_map(pre_activation, |g, x| g * s.gradient(x))
}

/// A `+-1` tensor stored one bit per element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBitTensor {
    shape: Shape4,
    words: Vec<u64>,
}

impl PackedBitTensor {
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    /// Packs a tensor whose every element is exactly `+1` or `-1`.
    pub fn pack(x: &Tensor4) -> Result<Self> {
        let mut words = vec![0u64; x.len().div_ceil(WORD_BITS)];
        for (i, &v) in x.data().iter().enumerate() {
            if v == 1.0 {
                words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
            } else if v != -1.0 {
                return Err(Error::NotBinary { index: i, value: v });
            }
        }
        Ok(Self { shape: x.shape(), words })
    }

    /// Packs `sign(x)` without materializing the signed tensor.
    pub fn pack_signs(x: &Tensor4) -> Self {
        let mut words = vec![0u64; x.len().div_ceil(WORD_BITS)];
        for (i, &v) in x.data().iter().enumerate() {
            if v >= 0.0 {
                words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
            }
        }
        Self { shape: x.shape(), words }
    }

    #[inline]
    pub fn bit(&self, index: usize) -> bool {
        self.words[index / WORD_BITS] >> (index % WORD_BITS) & 1 == 1
    }

    pub fn unpack(&self) -> Tensor4 {
        let data = (0..self.len()).map(|i| if self.bit(i) { 1.0 } else { -1.0 }).collect();
        Tensor4::from_vec_unchecked(self.shape, data).expect("length matches shape")
    }

    /// Little-endian byte image of the packed bits, truncated to
    /// `ceil(len / 8)` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.len().div_ceil(8));
        out
    }

    /// Inverse of [`Self::to_bytes`]. Tail bits beyond `shape.len()` must be
    /// zero.
    pub fn from_bytes(shape: Shape4, bytes: &[u8]) -> Result<Self> {
        let expected = shape.len().div_ceil(8);
        if bytes.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: bytes.len(),
            });
        }
        let mut words = vec![0u64; shape.len().div_ceil(WORD_BITS)];
        for (i, &b) in bytes.iter().enumerate() {
            words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        let tail = shape.len() % WORD_BITS;
        if tail != 0 {
            let last = words.last().copied().unwrap_or(0);
            if last >> tail != 0 {
                return Err(Error::Geometry(format!(
                    "nonzero tail bits beyond element {}",
                    shape.len()
                )));
            }
        }
        Ok(Self { shape, words })
    }

    /// Repacks as one run of channel bits per pixel: for sample `n` and
    /// pixel `(y, x)` the words `[(n*h*w + y*w + x) * wpp ..][..wpp]` hold
    /// channels `0..c`, where `wpp = ceil(c / 64)`.
    fn channel_runs(&self) -> (usize, Vec<u64>) {
        let s = self.shape;
        let wpp = s.c.div_ceil(WORD_BITS);
        let hw = s.h * s.w;
        let mut runs = vec![0u64; s.n * hw * wpp];
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * hw;
                let (word, shift) = (c / WORD_BITS, c % WORD_BITS);
                let dst = &mut runs[n * hw * wpp..][..hw * wpp];
                for (p, d) in dst.chunks_exact_mut(wpp).enumerate() {
                    let i = base + p;
                    d[word] |= (self.words[i / WORD_BITS] >> (i % WORD_BITS) & 1) << shift;
                }
            }
        }
        (wpp, runs)
    }
}

#[inline(always)]
fn window_dots_generic(windows: &[u64], kernels: &[u64], row: usize, plane: usize, n_total: i64, out: &mut [f64]) {
    let outs = kernels.len() / row;
    for (wins, out_n) in windows.chunks_exact(plane * row).zip(out.chunks_exact_mut(outs * plane)) {
        for (krow, out_o) in kernels.chunks_exact(row).zip(out_n.chunks_exact_mut(plane)) {
            for (win, y) in wins.chunks_exact(row).zip(out_o.iter_mut()) {
                let m: u32 = win.iter().zip(krow).map(|(a, b)| (a ^ b).count_ones()).sum();
                *y = (n_total - 2 * m as i64) as f64;
            }
        }
    }
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "popcnt")]
unsafe fn window_dots_popcnt(windows: &[u64], kernels: &[u64], row: usize, plane: usize, n_total: i64, out: &mut [f64]) {
    window_dots_generic(windows, kernels, row, plane, n_total, out)
}

/// Writes `n_total - 2 * mismatches` for every (sample, kernel row, output
/// pixel) into the `(n, o, h, w)` output.
fn window_dots(windows: &[u64], kernels: &[u64], row: usize, plane: usize, n_total: i64, out: &mut [f64]) {
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    if std::is_x86_feature_detected!("popcnt") {
        // SAFETY: the CPU supports the instruction set enabled on the callee
        unsafe { window_dots_popcnt(windows, kernels, row, plane, n_total, out) };
        return;
    }
    window_dots_generic(windows, kernels, row, plane, n_total, out)
}

/// Convolution geometry shared by the packed and float paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

/// Binary cross-correlation of packed `+-1` tensors.
///
/// `kernel` has shape `(out_channels, in_channels, H, H)`. Padded cells read
/// as `-1` (bit 0). Each window computes `2 * popcount(XNOR(a, b)) - n`, so
/// the result equals [`crate::tensor::conv2d`] on the unpacked tensors with
/// `pad_value = -1` exactly.
pub fn xnor_popcount_conv(
    input: &PackedBitTensor,
    kernel: &PackedBitTensor,
    geometry: ConvGeometry,
) -> Result<Tensor4> {
    let is = input.shape();
    let ks = kernel.shape();
    if ks.c != is.c {
        return Err(Error::Geometry(format!(
            "kernel expects {} input channels, input has {}",
            ks.c, is.c
        )));
    }
    if ks.h != ks.w || ks.h % 2 == 0 {
        return Err(Error::Geometry(format!(
            "kernel must be square with odd side, got {}x{}",
            ks.h, ks.w
        )));
    }
    let ConvGeometry { stride, pad } = geometry;
    let (oh, ow) = match (
        conv_output_side(is.h, ks.h, stride, pad),
        conv_output_side(is.w, ks.w, stride, pad),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => return Err(Error::Geometry(format!("output size < 1 for input {}x{}", is.h, is.w))),
    };
    let (wpp, in_runs) = input.channel_runs();
    let (_, k_runs) = kernel.channel_runs();
    let row = ks.h * ks.w * wpp;

    // bit im2col: one run of `row` words per output pixel, padded taps left
    // as zero words (all -1)
    let pixels = is.n * oh * ow;
    let mut windows = vec![0u64; pixels * row];
    for n in 0..is.n {
        for y in 0..oh {
            for x in 0..ow {
                let dst = &mut windows[((n * oh + y) * ow + x) * row..][..row];
                for ky in 0..ks.h {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= is.h as isize {
                        continue;
                    }
                    for kx in 0..ks.w {
                        let ix = (x * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= is.w as isize {
                            continue;
                        }
                        let src = ((n * is.h + iy as usize) * is.w + ix as usize) * wpp;
                        dst[(ky * ks.w + kx) * wpp..][..wpp].copy_from_slice(&in_runs[src..src + wpp]);
                    }
                }
            }
        }
    }

    // unused channel bits are zero on both sides, so only real channels can
    // disagree: dot = n - 2 * mismatches
    let n_total = (is.c * ks.h * ks.w) as i64;
    let mut out = Tensor4::zeros(Shape4::new(is.n, ks.n, oh, ow)?);
    window_dots(&windows, &k_runs, row, oh * ow, n_total, out.data_mut());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    fn random_pm1(s: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
        let data = (0..s.len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        Tensor4::from_vec(s, data).unwrap()
    }

    #[test]
    fn sign_examples() {
        let x = Tensor4::from_vec(shape(1, 1, 1, 3), vec![-0.3, 0.7, 0.0]).unwrap();
        let s = sign_forward(&x);
        assert_eq!(s.data(), &[-1.0, 1.0, 1.0]);
        assert_eq!(sign_forward(&s), s);
    }

    #[test]
    fn gaussian_peak_value() {
        let s = SignSurrogate::default();
        // A / (sigma sqrt(pi)) = 3 sqrt(2 pi) / sqrt(pi) = 3 sqrt(2)
        approx::assert_relative_eq!(s.gradient(0.0), 3.0 * 2f64.sqrt(), max_relative = 1e-15);
        approx::assert_relative_eq!(s.gradient(0.0), 4.242640687119285, max_relative = 1e-15);
        assert!(s.gradient(40.0) == 0.0 && s.gradient(-40.0) == 0.0);
        assert!(s.gradient(6.0) < 1e-14);
    }

    #[test]
    fn sign_backward_scales_upstream() {
        let s = SignSurrogate::default();
        let up = Tensor4::from_vec(shape(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let pre = Tensor4::from_vec(shape(1, 1, 1, 2), vec![0.0, 0.5]).unwrap();
        let g = sign_backward(&up, &pre, &s).unwrap();
        assert_eq!(g.data()[0], s.gradient(0.0));
        assert_eq!(g.data()[1], 2.0 * s.gradient(0.5));
        assert!(sign_backward(&up, &Tensor4::zeros(shape(1, 1, 2, 1)), &s).is_err());
    }

    #[test]
    fn gaussian_is_derivative_of_erf_primitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in [SignSurrogate::default(), SignSurrogate::new(1.5, 0.7).unwrap()] {
            for _ in 0..500 {
                let x: f64 = rng.gen_range(-3.0..3.0) * s.sigma;
                let h = 1e-5;
                let fd = (s.smooth(x + h) - s.smooth(x - h)) / (2.0 * h);
                let an = s.gradient(x);
                assert!((fd - an).abs() <= 1e-6 * an.abs(), "x={x} fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn surrogate_rejects_nonpositive() {
        assert!(SignSurrogate::new(0.0, 1.0).is_err());
        assert!(SignSurrogate::new(1.0, -1.0).is_err());
    }

    #[test]
    fn pack_bit_order() {
        let x = Tensor4::from_vec(shape(1, 1, 1, 4), vec![1.0, -1.0, 1.0, 1.0]).unwrap();
        let p = PackedBitTensor::pack(&x).unwrap();
        assert_eq!(p.words(), &[0b1101]);
        let ones = Tensor4::filled(shape(1, 1, 8, 8), 1.0);
        assert_eq!(PackedBitTensor::pack(&ones).unwrap().words(), &[u64::MAX]);
        let bad = Tensor4::from_vec(shape(1, 1, 1, 2), vec![1.0, 0.5]).unwrap();
        assert_eq!(
            PackedBitTensor::pack(&bad),
            Err(Error::NotBinary { index: 1, value: 0.5 })
        );
    }

    #[test]
    fn storage_is_one_bit_per_element() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_pm1(shape(3, 5, 7, 9), &mut rng);
        let p = PackedBitTensor::pack(&x).unwrap();
        assert_eq!(p.words().len(), x.len().div_ceil(64));
        let tail = x.len() % 64;
        assert_eq!(p.words().last().unwrap() >> tail, 0);
        assert_eq!(p.to_bytes().len(), x.len().div_ceil(8));
        assert_eq!(PackedBitTensor::from_bytes(x.shape(), &p.to_bytes()).unwrap(), p);
        let mut bytes = p.to_bytes();
        *bytes.last_mut().unwrap() |= 0x80;
        assert!(PackedBitTensor::from_bytes(x.shape(), &bytes).is_err());
    }

    #[test]
    fn popcount_all_ones() {
        let x = PackedBitTensor::pack(&Tensor4::filled(shape(1, 1, 3, 3), 1.0)).unwrap();
        let out = xnor_popcount_conv(&x, &x, ConvGeometry { stride: 1, pad: 0 }).unwrap();
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn popcount_perfect_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_pm1(shape(1, 70, 3, 3), &mut rng);
        let p = PackedBitTensor::pack(&x).unwrap();
        let out = xnor_popcount_conv(&p, &p, ConvGeometry { stride: 1, pad: 0 }).unwrap();
        assert_eq!(out.data(), &[630.0]);
    }

    #[test]
    fn popcount_geometry_errors() {
        let a = PackedBitTensor::pack(&Tensor4::filled(shape(1, 2, 3, 3), 1.0)).unwrap();
        let k = PackedBitTensor::pack(&Tensor4::filled(shape(1, 3, 3, 3), 1.0)).unwrap();
        assert!(xnor_popcount_conv(&a, &k, ConvGeometry { stride: 1, pad: 0 }).is_err());
        let big = PackedBitTensor::pack(&Tensor4::filled(shape(1, 2, 5, 5), 1.0)).unwrap();
        assert!(xnor_popcount_conv(&a, &big, ConvGeometry { stride: 1, pad: 0 }).is_err());
    }

    #[test]
    fn popcount_matches_float_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..40 {
            let c = rng.gen_range(1..140);
            let h = rng.gen_range(3..9);
            let w = rng.gen_range(3..9);
            let o = rng.gen_range(1..5);
            let pad = rng.gen_range(0..2);
            let stride = rng.gen_range(1..3);
            let input = random_pm1(shape(2, c, h, w), &mut rng);
            let kernel = random_pm1(shape(o, c, 3, 3), &mut rng);
            let fast = xnor_popcount_conv(
                &PackedBitTensor::pack(&input).unwrap(),
                &PackedBitTensor::pack(&kernel).unwrap(),
                ConvGeometry { stride, pad },
            )
            .unwrap();
            let slow = conv2d(&input, &kernel, stride, pad, -1.0).unwrap();
            assert_eq!(fast, slow);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pack_round_trips(seed in any::<u64>(), n in 1usize..3, c in 1usize..70, h in 1usize..5, w in 1usize..5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random_pm1(shape(n, c, h, w), &mut rng);
                let p = PackedBitTensor::pack(&x).unwrap();
                prop_assert_eq!(p.unpack(), x.clone());
                prop_assert_eq!(PackedBitTensor::pack_signs(&x), p);
            }
        }
    }
}
