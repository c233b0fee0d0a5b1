//! Circulant transfer matrix, ring rotation and circulant filters.
//!
//! The eight peripheral cells of a `3x3` filter form a ring, enumerated
//! counter-clockwise starting at the top-left corner:
//!
//! ```text
//!   0 7 6
//!   1 . 5
//!   2 3 4
//! ```
//!
//! Orientation `j` of `K` shifts every ring cell `j * 8 / K` places along
//! that order; the center cell never moves. With `K = 4`, orientation 1 is
//! exactly a 90 degree counter-clockwise rotation of the array.
//!
//! Permutations are stored as gather tables over flat row-major cell
//! indices: `rotated[p] = w[forward[j][p]]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Flat indices of the ring cells of a `3x3` plane, counter-clockwise from
/// the top-left corner.
pub const RING: [usize; 8] = [0, 3, 6, 7, 8, 5, 2, 1];
pub const CENTER: usize = 4;

pub const SUPPORTED_ORIENTATIONS: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CirculantSpec {
    k: usize,
    side: usize,
    forward: Vec<Vec<usize>>,
    inverse: Vec<Vec<usize>>,
}

/// Gather table for a counter-clockwise shift of the ring by `steps` cells.
fn ring_gather(steps: usize) -> [usize; 9] {
    let mut src = [0usize; 9];
    src[CENTER] = CENTER;
    for i in 0..8 {
        // the value at RING[i] moves to RING[i + steps]
        src[RING[(i + steps) % 8]] = RING[i];
    }
    src
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (p, &s) in perm.iter().enumerate() {
        inv[s] = p;
    }
    inv
}

impl CirculantSpec {
    pub fn new(k: usize, filter_side: usize) -> Result<Self> {
        if !SUPPORTED_ORIENTATIONS.contains(&k) {
            return Err(Error::UnsupportedOrientations(k));
        }
        let forward: Vec<Vec<usize>> = match filter_side {
            1 => vec![vec![0]; k],
            3 => (0..k).map(|j| ring_gather(j * (8 / k)).to_vec()).collect(),
            other => return Err(Error::UnsupportedFilterSide(other)),
        };
        let inverse = forward.iter().map(|p| invert(p)).collect();
        Ok(Self {
            k,
            side: filter_side,
            forward,
            inverse,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn filter_side(&self) -> usize {
        self.side
    }

    /// Cells per filter plane, `H * H`.
    pub fn plane_len(&self) -> usize {
        self.side * self.side
    }

    /// Flat index of the rotation-invariant center cell.
    pub fn center(&self) -> usize {
        self.plane_len() / 2
    }

    /// Ring cell coordinates `(row, col)` in counter-clockwise order. Empty
    /// for `1x1` filters.
    pub fn ring_index(&self) -> Vec<(usize, usize)> {
        if self.side == 1 {
            return Vec::new();
        }
        RING.iter().map(|&i| (i / 3, i % 3)).collect()
    }

    /// Gather table realizing `m_j`.
    pub fn forward_perm(&self, j: usize) -> &[usize] {
        &self.forward[j]
    }

    /// Gather table realizing `p_j`, the inverse of `m_j`.
    pub fn inverse_perm(&self, j: usize) -> &[usize] {
        &self.inverse[j]
    }

    fn check_orientation(&self, j: usize) -> Result<()> {
        if j >= self.k {
            return Err(Error::OrientationOutOfRange { index: j, k: self.k });
        }
        Ok(())
    }

    fn check_plane(&self, len: usize) -> Result<()> {
        if len != self.plane_len() {
            return Err(Error::FilterSize {
                expected: self.plane_len(),
                got: len,
            });
        }
        Ok(())
    }

    /// The `K x K` integer view of the circulant transfer matrix.
    ///
    /// The `K` ring cells visited by orientation steps are labelled
    /// `0..K`; column `c` lists, for each of those cells, the label found
    /// there after applying rotation `c`. The result is circulant with
    /// `M[r][c] == (r - c) mod K`.
    pub fn transfer_matrix(&self) -> Vec<Vec<usize>> {
        let step = 8 / self.k;
        let mut labels = [usize::MAX; 9];
        for r in 0..self.k {
            labels[RING[r * step]] = r;
        }
        let mut m = vec![vec![0; self.k]; self.k];
        for c in 0..self.k {
            let gather = ring_gather(c * step);
            for (r, row) in m.iter_mut().enumerate() {
                row[c] = labels[gather[RING[r * step]]];
            }
        }
        m
    }

    /// Writes orientation `j` of `w` into `out`.
    pub fn rotate_into(&self, w: &[f64], j: usize, out: &mut [f64]) {
        for (o, &src) in out.iter_mut().zip(&self.forward[j]) {
            *o = w[src];
        }
    }

    /// Inverse-rotates each of the `K` contiguous gradient planes in
    /// `grads` and accumulates them into `out`.
    pub fn fold_into(&self, grads: &[f64], out: &mut [f64]) {
        let len = self.plane_len();
        for (j, plane) in grads.chunks_exact(len).enumerate() {
            for (s, o) in out.iter_mut().enumerate() {
                *o += plane[self.inverse[j][s]];
            }
        }
    }

    pub fn rotate(&self, w: &LearnedFilter, j: usize) -> Result<Vec<f64>> {
        self.check_orientation(j)?;
        self.check_plane(w.weights.len())?;
        let mut out = vec![0.0; self.plane_len()];
        self.rotate_into(&w.weights, j, &mut out);
        Ok(out)
    }

    /// Builds the `K` orientations of a learned filter.
    pub fn expand_cif(&self, w: &LearnedFilter) -> Result<CiF> {
        self.check_plane(w.weights.len())?;
        let sub_filters = (0..self.k)
            .map(|j| {
                let mut out = vec![0.0; self.plane_len()];
                self.rotate_into(&w.weights, j, &mut out);
                out
            })
            .collect();
        Ok(CiF { sub_filters })
    }

    /// Adjoint of [`CirculantSpec::expand_cif`]: rotates each orientation's
    /// gradient back by `p_j` and sums them into one learned-filter
    /// gradient. The center cell is summed directly since it never moves.
    pub fn fold_gradient(&self, cif_grads: &[Vec<f64>]) -> Result<Vec<f64>> {
        if cif_grads.len() != self.k {
            return Err(Error::PlaneCount {
                expected: self.k,
                got: cif_grads.len(),
            });
        }
        let mut out = vec![0.0; self.plane_len()];
        for (j, plane) in cif_grads.iter().enumerate() {
            self.check_plane(plane.len())?;
            for (s, o) in out.iter_mut().enumerate() {
                *o += plane[self.inverse[j][s]];
            }
        }
        Ok(out)
    }

    /// Test hook: swaps two entries of one inverse table so the fold no
    /// longer undoes the forward rotation.
    #[doc(hidden)]
    pub fn with_corrupted_inverse(mut self) -> Self {
        if self.side == 3 {
            let j = if self.k > 1 { 1 } else { 0 };
            self.inverse[j].swap(RING[0], RING[1]);
        }
        self
    }
}

/// The single trainable copy of a filter, center included.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedFilter {
    pub weights: Vec<f64>,
}

impl LearnedFilter {
    pub fn new(side: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != side * side {
            return Err(Error::FilterSize {
                expected: side * side,
                got: weights.len(),
            });
        }
        Ok(Self { weights })
    }
}

/// The `K` rotated sub-filters of one learned filter. Each sub-filter is
/// shared by all `K` channels of an input feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct CiF {
    pub sub_filters: Vec<Vec<f64>>,
}
