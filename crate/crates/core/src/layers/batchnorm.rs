use alloc::vec;
use alloc::vec::Vec;

use super::Mode;
use crate::tensor::Tensor4;
use crate::{Error, Result};

/// Per-channel batch normalization over `(n, h, w)`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    /// Set after the first training batch; evaluation needs running stats.
    pub tracked: bool,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    normalized: Tensor4,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
            tracked: false,
            grad_gamma: vec![0.0; channels],
            grad_beta: vec![0.0; channels],
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.iter_mut().for_each(|g| *g = 0.0);
        self.grad_beta.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        let s = x.shape();
        if s.c != self.channels() {
            return Err(Error::Geometry(alloc::format!(
                "batch norm has {} channels, input has {}",
                self.channels(),
                s.c
            )));
        }
        let count = (s.n * s.h * s.w) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; s.c];
                let mut var = vec![0.0; s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        mean[c] += x.plane(n, c).iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for n in 0..s.n {
                    for c in 0..s.c {
                        var[c] += x.plane(n, c).iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for c in 0..s.c {
                    self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
                    self.running_var[c] =
                        (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c] * unbias;
                }
                self.tracked = true;
                (mean, var)
            }
            Mode::Eval => {
                if !self.tracked {
                    return Err(Error::EvalBeforeTraining);
                }
                (self.running_mean.clone(), self.running_var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + self.eps)).collect();
        let mut normalized = x.clone();
        let mut out = x.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                for v in normalized.plane_mut(n, c) {
                    *v = (*v - mean[c]) * inv_std[c];
                }
                let (g, b) = (self.gamma[c], self.beta[c]);
                for (o, &z) in out.plane_mut(n, c).iter_mut().zip(normalized.plane(n, c)) {
                    *o = g * z + b;
                }
            }
        }
        self.cache = match mode {
            Mode::Train => Some(Cache { normalized, inv_std }),
            Mode::Eval => None,
        };
        Ok(out)
    }

    /// Backward through a training-mode forward (batch statistics).
    pub fn backward(&mut self, upstream: &Tensor4) -> Result<Tensor4> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache)?;
        upstream.check_same_shape(&cache.normalized)?;
        let s = upstream.shape();
        let count = (s.n * s.h * s.w) as f64;
        let mut sum_dy = vec![0.0; s.c];
        let mut sum_dy_z = vec![0.0; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                for (&g, &z) in upstream.plane(n, c).iter().zip(cache.normalized.plane(n, c)) {
                    sum_dy[c] += g;
                    sum_dy_z[c] += g * z;
                }
            }
        }
        for c in 0..s.c {
            self.grad_beta[c] += sum_dy[c];
            self.grad_gamma[c] += sum_dy_z[c];
        }
        let mut dx = Tensor4::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let scale = self.gamma[c] * cache.inv_std[c] / count;
                let dst = dx.plane_mut(n, c);
                for ((o, &g), &z) in dst.iter_mut().zip(upstream.plane(n, c)).zip(cache.normalized.plane(n, c)) {
                    *o = scale * (count * g - sum_dy[c] - z * sum_dy_z[c]);
                }
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(s: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
        Tensor4::from_vec(s, (0..s.len()).map(|_| rng.gen_range(-2.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut bn = BatchNorm::new(2);
        bn.beta = vec![0.25, -0.5];
        let x = Tensor4::filled(Shape4::new(3, 2, 2, 2).unwrap(), 7.0);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for n in 0..3 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(n, 1).iter().all(|&v| v == -0.5));
        }
    }

    #[test]
    fn normalizes_batch_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Shape4::new(4, 3, 5, 5).unwrap();
        let x = random(s, &mut rng);
        let mut bn = BatchNorm::new(3);
        let y = bn.forward(&x, Mode::Train).unwrap();
        let count = 100.0;
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / count;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn eval_before_training_fails() {
        let mut bn = BatchNorm::new(1);
        let x = Tensor4::zeros(Shape4::new(1, 1, 1, 1).unwrap());
        assert_eq!(bn.forward(&x, Mode::Eval).unwrap_err(), Error::EvalBeforeTraining);
        bn.forward(&Tensor4::filled(Shape4::new(2, 1, 1, 1).unwrap(), 1.0), Mode::Train).unwrap();
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Shape4::new(3, 2, 3, 2).unwrap();
        let x = random(s, &mut rng);
        let probe = random(s, &mut rng);
        let mut bn = BatchNorm::new(2);
        bn.gamma = vec![1.3, -0.7];
        bn.beta = vec![0.2, 0.1];
        let obj = |bn: &mut BatchNorm, x: &Tensor4| bn.forward(x, Mode::Train).unwrap().dot(&probe).unwrap();
        obj(&mut bn, &x);
        let dx = bn.backward(&probe).unwrap();
        let h = 1e-5;
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = x.data()[i];
            xp.data_mut()[i] = orig + h;
            let up = obj(&mut bn, &xp);
            xp.data_mut()[i] = orig - h;
            let down = obj(&mut bn, &xp);
            xp.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = dx.data()[i];
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3), "{i}: {fd} vs {an}");
        }
        let (gg, gb) = (bn.grad_gamma.clone(), bn.grad_beta.clone());
        for c in 0..2 {
            let orig = bn.gamma[c];
            bn.gamma[c] = orig + h;
            let up = obj(&mut bn, &x);
            bn.gamma[c] = orig - h;
            let down = obj(&mut bn, &x);
            bn.gamma[c] = orig;
            assert!(((up - down) / (2.0 * h) - gg[c]).abs() < 1e-6);
            let orig = bn.beta[c];
            bn.beta[c] = orig + h;
            let up = obj(&mut bn, &x);
            bn.beta[c] = orig - h;
            let down = obj(&mut bn, &x);
            bn.beta[c] = orig;
            assert!(((up - down) / (2.0 * h) - gb[c]).abs() < 1e-6);
        }
    }
}
