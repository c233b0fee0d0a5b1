use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::gemm::{gemm, MatRef};
use crate::tensor::{Shape4, Tensor4};
use crate::{Error, Result};

/// Fully-connected layer over the flattened `(c, h, w)` features of each
/// sample. Weights are `(out, in)` row-major.
#[derive(Debug, Clone)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
    input: Option<Tensor4>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            grad_weight: vec![0.0; inputs * outputs],
            grad_bias: vec![0.0; outputs],
            input: None,
        }
    }

    pub fn init_uniform(&mut self, rng: &mut impl Rng) {
        let bound = libm::sqrt(6.0 / (self.inputs + self.outputs) as f64);
        for w in &mut self.weight {
            *w = rng.gen_range(-bound..=bound);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.iter_mut().for_each(|g| *g = 0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let s = x.shape();
        if s.sample_len() != self.inputs {
            return Err(Error::Geometry(alloc::format!(
                "linear layer expects {} features, got {}",
                self.inputs,
                s.sample_len()
            )));
        }
        let mut out = vec![0.0; s.n * self.outputs];
        for row in out.chunks_exact_mut(self.outputs) {
            row.copy_from_slice(&self.bias);
        }
        gemm(
            1.0,
            MatRef::new(x.data(), s.n, self.inputs),
            MatRef::new(&self.weight, self.outputs, self.inputs).t(),
            1.0,
            &mut out,
        );
        self.input = Some(x.clone());
        Tensor4::from_vec_unchecked(Shape4::new(s.n, self.outputs, 1, 1)?, out)
    }

    pub fn backward(&mut self, upstream: &Tensor4) -> Result<Tensor4> {
        let x = self.input.as_ref().ok_or(Error::MissingCache)?;
        let n = x.shape().n;
        if upstream.len() != n * self.outputs {
            return Err(Error::LengthMismatch {
                expected: n * self.outputs,
                got: upstream.len(),
            });
        }
        let up = upstream.data();
        gemm(
            1.0,
            MatRef::new(up, n, self.outputs).t(),
            MatRef::new(x.data(), n, self.inputs),
            1.0,
            &mut self.grad_weight,
        );
        for row in up.chunks_exact(self.outputs) {
            for (g, &d) in self.grad_bias.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; n * self.inputs];
        gemm(
            1.0,
            MatRef::new(up, n, self.outputs),
            MatRef::new(&self.weight, self.outputs, self.inputs),
            0.0,
            &mut dx,
        );
        Tensor4::from_vec_unchecked(x.shape(), dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_weights_pass_through() {
        let mut fc = Linear::new(3, 3);
        for i in 0..3 {
            fc.weight[i * 3 + i] = 1.0;
        }
        let x = Tensor4::from_vec(Shape4::new(2, 3, 1, 1).unwrap(), vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let y = fc.forward(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut fc = Linear::new(6, 4);
        fc.init_uniform(&mut rng);
        fc.bias.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
        let s = Shape4::new(3, 2, 3, 1).unwrap();
        let x = Tensor4::from_vec(s, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let probe = Tensor4::from_vec(Shape4::new(3, 4, 1, 1).unwrap(), (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        fc.forward(&x).unwrap();
        let dx = fc.backward(&probe).unwrap();
        let h = 1e-6;
        for i in 0..fc.weight.len() {
            let orig = fc.weight[i];
            fc.weight[i] = orig + h;
            let up = fc.forward(&x).unwrap().dot(&probe).unwrap();
            fc.weight[i] = orig - h;
            let down = fc.forward(&x).unwrap().dot(&probe).unwrap();
            fc.weight[i] = orig;
            assert!(((up - down) / (2.0 * h) - fc.grad_weight[i]).abs() < 1e-8);
        }
        let mut xp = x.clone();
        for i in 0..x.len() {
            xp.data_mut()[i] = x.data()[i] + h;
            let up = fc.forward(&xp).unwrap().dot(&probe).unwrap();
            xp.data_mut()[i] = x.data()[i] - h;
            let down = fc.forward(&xp).unwrap().dot(&probe).unwrap();
            xp.data_mut()[i] = x.data()[i];
            assert!(((up - down) / (2.0 * h) - dx.data()[i]).abs() < 1e-8);
        }
        assert!(Linear::new(5, 2).forward(&x).is_err());
    }
}
