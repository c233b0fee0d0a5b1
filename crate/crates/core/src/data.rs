//! Labeled image sets, IDX parsing, rotation augmentation and batching.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::rng::{keyed_rng, DOMAIN_AUGMENT};
use crate::tensor::{Shape4, Tensor4};
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// `N x 1 x side x side` images with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    images: Tensor4,
    labels: Vec<usize>,
}

impl LabeledImageSet {
    pub fn new(images: Tensor4, labels: Vec<usize>) -> Result<Self> {
        let s = images.shape();
        if s.c != 1 {
            return Err(Error::Geometry(format!("expected single-channel images, got {} channels", s.c)));
        }
        if labels.len() != s.n {
            return Err(Error::LengthMismatch {
                expected: s.n,
                got: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn images(&self) -> &Tensor4 {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.shape().h
    }

    pub fn image(&self, index: usize) -> &[f64] {
        self.images.plane(index, 0)
    }

    /// The first `limit` samples (or all of them).
    pub fn truncated(&self, limit: usize) -> Result<Self> {
        let n = limit.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Samples at `indices`, in that order, as a new set.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Self::new(images, labels)
    }

    /// Gathers a batch tensor and its labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor4, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let s = self.images.shape();
        let plane = s.plane_len();
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let images = Tensor4::from_vec_unchecked(Shape4::new(indices.len(), 1, s.h, s.w)?, data)?;
        Ok((images, labels))
    }

    /// Mean and standard deviation over all pixels.
    pub fn pixel_stats(&self) -> (f64, f64) {
        let d = self.images.data();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, libm::sqrt(var))
    }

    /// Zero-pads every image symmetrically to `side x side`.
    pub fn padded(&self, side: usize) -> Result<Self> {
        let s = self.images.shape();
        if side < s.h || side < s.w || (side - s.h) % 2 != 0 || (side - s.w) % 2 != 0 {
            return Err(Error::Geometry(format!(
                "cannot pad {}x{} symmetrically to {side}x{side}",
                s.h, s.w
            )));
        }
        let (oy, ox) = ((side - s.h) / 2, (side - s.w) / 2);
        let mut out = Tensor4::zeros(Shape4::new(s.n, 1, side, side)?);
        for n in 0..s.n {
            let src = self.images.plane(n, 0);
            let dst = out.plane_mut(n, 0);
            for y in 0..s.h {
                dst[(y + oy) * side + ox..][..s.w].copy_from_slice(&src[y * s.w..][..s.w]);
            }
        }
        Self::new(out, self.labels.clone())
    }

    /// Parses an IDX image file (`0x00000803`) and label file
    /// (`0x00000801`), scaling pixel bytes to `[0, 1]`.
    pub fn from_idx(images: &[u8], labels: &[u8]) -> Result<Self> {
        let (count, rows, cols, pixels) = parse_idx_images(images)?;
        let labels = parse_idx_labels(labels)?;
        if labels.len() != count {
            return Err(Error::Idx {
                offset: 4,
                reason: format!("image file holds {count} items, label file holds {}", labels.len()),
            });
        }
        let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let images = Tensor4::from_vec_unchecked(Shape4::new(count, 1, rows, cols)?, data)?;
        Self::new(images, labels)
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx {
            offset,
            reason: format!("truncated header: missing {what}"),
        })
}

/// Returns `(count, rows, cols, pixel bytes)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx {
            offset: 0,
            reason: format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let count = read_u32(bytes, 4, "item count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    let need = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Idx {
            offset: 4,
            reason: "dimensions overflow".to_string(),
        })?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Idx {
            offset: 16 + body.len(),
            reason: format!("truncated pixel data: expected {need} bytes after the header, found {}", body.len()),
        });
    }
    if body.len() > need {
        return Err(Error::Idx {
            offset: 16 + need,
            reason: format!("{} trailing bytes", body.len() - need),
        });
    }
    Ok((count, rows, cols, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx {
            offset: 0,
            reason: format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let count = read_u32(bytes, 4, "item count")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Idx {
            offset: 8 + body.len().min(count),
            reason: format!("expected {count} label bytes, found {}", body.len()),
        });
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Encodes images (values clamped to `[0, 1]` and rounded to bytes) in the
/// IDX image format.
pub fn encode_idx_images(set: &LabeledImageSet) -> Vec<u8> {
    let s = set.images.shape();
    let mut out = Vec::with_capacity(16 + s.len());
    for v in [IDX_IMAGES_MAGIC, s.n as u32, s.h as u32, s.w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(set.images.data().iter().map(|&p| libm::round(p.clamp(0.0, 1.0) * 255.0) as u8));
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Rotates a square plane counter-clockwise by `degrees` about its center
/// using bilinear interpolation; samples falling outside read as 0.
pub fn rotate_image(plane: &[f64], side: usize, degrees: f64) -> Vec<f64> {
    let theta = degrees.to_radians();
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let c = (side as f64 - 1.0) / 2.0;
    let get = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= side as isize || y >= side as isize {
            0.0
        } else {
            plane[y as usize * side + x as usize]
        }
    };
    let mut out = vec![0.0; side * side];
    for yo in 0..side {
        for xo in 0..side {
            // output pixel in y-up coordinates, rotated back into the source
            let u = xo as f64 - c;
            let v = c - yo as f64;
            let su = cos * u + sin * v;
            let sv = -sin * u + cos * v;
            let x = su + c;
            let y = c - sv;
            let (x0, y0) = (libm::floor(x), libm::floor(y));
            let (fx, fy) = (x - x0, y - y0);
            let (xi, yi) = (x0 as isize, y0 as isize);
            out[yo * side + xo] = (1.0 - fy) * ((1.0 - fx) * get(xi, yi) + fx * get(xi + 1, yi))
                + fy * ((1.0 - fx) * get(xi, yi + 1) + fx * get(xi + 1, yi + 1));
        }
    }
    out
}

/// Rotation range for the MNIST-rot variant, in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub lo: f64,
    pub hi: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { lo: -45.0, hi: 45.0 }
    }
}

impl AugmentSpec {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("rotation range [{lo}, {hi}] is invalid")));
        }
        Ok(Self { lo, hi })
    }

    /// The angle for sample `index`, a pure function of `(seed, index)`.
    pub fn angle(&self, seed: u64, index: usize) -> f64 {
        if self.lo == self.hi {
            return self.lo;
        }
        let mut rng = keyed_rng(seed, DOMAIN_AUGMENT, index as u64);
        rng.gen_range(self.lo..self.hi)
    }
}

/// Rotates every sample once by its keyed angle. Labels are unchanged.
pub fn make_rot_variant(set: &LabeledImageSet, spec: &AugmentSpec, seed: u64) -> Result<LabeledImageSet> {
    let s = set.images.shape();
    if s.h != s.w {
        return Err(Error::Geometry(format!("rotation needs square images, got {}x{}", s.h, s.w)));
    }
    let mut out = set.images.clone();
    for i in 0..s.n {
        let angle = spec.angle(seed, i);
        if angle != 0.0 {
            let rotated = rotate_image(set.image(i), s.h, angle);
            out.plane_mut(i, 0).copy_from_slice(&rotated);
        }
    }
    LabeledImageSet::new(out, set.labels.clone())
}
