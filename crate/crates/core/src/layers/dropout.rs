use alloc::vec::Vec;

use rand::Rng;

use crate::tensor::Tensor4;
use crate::{Error, Result};

/// Inverted dropout: kept units are scaled by `1 / (1 - p)` in training,
/// evaluation is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    p: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(alloc::format!("dropout rate must be in [0, 1), got {p}")));
        }
        Ok(Self { p, mask: None })
    }

    pub fn rate(&self) -> f64 {
        self.p
    }

    pub fn forward_train(&mut self, x: &Tensor4, rng: &mut impl Rng) -> Tensor4 {
        if self.p == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 / (1.0 - self.p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        let mut out = x.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.mask = Some(mask);
        out
    }

    pub fn forward_eval(&mut self, x: &Tensor4) -> Tensor4 {
        self.mask = None;
        x.clone()
    }

    pub fn backward(&self, upstream: &Tensor4) -> Tensor4 {
        match &self.mask {
            None => upstream.clone(),
            Some(mask) => {
                let mut g = upstream.clone();
                for (o, m) in g.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                g
            }
        }
    }
}
