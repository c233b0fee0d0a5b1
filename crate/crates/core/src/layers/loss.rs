use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor4;
use crate::{Error, Result};

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(softmax - one_hot) / n`.
pub fn softmax_xent(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let s = logits.shape();
    let classes = s.sample_len();
    if labels.len() != s.n {
        return Err(Error::LengthMismatch {
            expected: s.n,
            got: labels.len(),
        });
    }
    let mut grad = Tensor4::zeros(s);
    let mut total = 0.0;
    let inv_n = 1.0 / s.n as f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::InvalidLabel { label, classes });
        }
        let row = logits.sample(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
        let log_z = max + libm::log(sum);
        total += log_z - row[label];
        let g = &mut grad.data_mut()[i * classes..][..classes];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = libm::exp(v - log_z) * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Class centers in feature space and the center-loss hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterLoss {
    pub classes: usize,
    pub dim: usize,
    /// `classes x dim`, row-major.
    pub centers: Vec<f64>,
    pub lambda: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterLossOutput {
    pub loss: f64,
    pub feature_grad: Tensor4,
    /// Additive update for `centers`, already scaled by `alpha`.
    pub center_update: Vec<f64>,
}

impl CenterLoss {
    pub fn new(classes: usize, dim: usize, lambda: f64, alpha: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(alloc::format!(
                "center loss needs lambda >= 0 and alpha in [0, 1], got {lambda}, {alpha}"
            )));
        }
        Ok(Self {
            classes,
            dim,
            centers: vec![0.0; classes * dim],
            lambda,
            alpha,
        })
    }

    /// `loss = (lambda/2) sum_i |f_i - c_{y_i}|^2`, gradient
    /// `lambda (f_i - c_{y_i})`; the center update moves each class center
    /// present in the batch toward the batch mean of that class by `alpha`.
    pub fn compute(&self, features: &Tensor4, labels: &[usize]) -> Result<CenterLossOutput> {
        let s = features.shape();
        if s.sample_len() != self.dim {
            return Err(Error::Geometry(alloc::format!(
                "center loss dimension {} does not match features {}",
                self.dim,
                s.sample_len()
            )));
        }
        if labels.len() != s.n {
            return Err(Error::LengthMismatch {
                expected: s.n,
                got: labels.len(),
            });
        }
        let mut grad = Tensor4::zeros(s);
        let mut sums = vec![0.0; self.classes * self.dim];
        let mut counts = vec![0usize; self.classes];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= self.classes {
                return Err(Error::InvalidLabel {
                    label: y,
                    classes: self.classes,
                });
            }
            let f = features.sample(i);
            let c = &self.centers[y * self.dim..][..self.dim];
            let g = &mut grad.data_mut()[i * self.dim..][..self.dim];
            for ((gd, &fv), &cv) in g.iter_mut().zip(f).zip(c) {
                let d = fv - cv;
                loss += d * d;
                *gd = self.lambda * d;
            }
            counts[y] += 1;
            for (s, &fv) in sums[y * self.dim..][..self.dim].iter_mut().zip(f) {
                *s += fv;
            }
        }
        let mut center_update = vec![0.0; self.classes * self.dim];
        for (y, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            for d in 0..self.dim {
                let mean = sums[y * self.dim + d] / count as f64;
                center_update[y * self.dim + d] = self.alpha * (mean - self.centers[y * self.dim + d]);
            }
        }
        Ok(CenterLossOutput {
            loss: 0.5 * self.lambda * loss,
            feature_grad: grad,
            center_update,
        })
    }

    pub fn apply_update(&mut self, update: &[f64]) {
        for (c, u) in self.centers.iter_mut().zip(update) {
            *c += u;
        }
    }
}
