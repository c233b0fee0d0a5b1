//! SGD with momentum and weight decay, and the step learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::Network;
use crate::{Error, Result};

/// One SGD update on a parameter slice:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
/// ```
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            got: if grads.len() != params.len() { grads.len() } else { velocity.len() },
        });
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for every parameter slice of a [`Network`], in
/// [`Network::visit_params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network, lr: f64) -> Result<()> {
        let mut slot = 0;
        let mut result = Ok(());
        let (momentum, decay) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        net.visit_params(|kind, params, grads| {
            if result.is_err() {
                return;
            }
            if velocity.len() == slot {
                velocity.push(vec![0.0; params.len()]);
            }
            let wd = if kind.decays() { decay } else { 0.0 };
            result = sgd_step(params, grads, &mut velocity[slot], lr, momentum, wd);
            slot += 1;
        });
        result
    }
}

/// `lr(epoch) = lr0 * factor^(epoch / period)` with zero-based epochs; a
/// period of 0 disables decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_period: usize,
}

impl LrSchedule {
    pub fn constant(lr0: f64) -> Self {
        Self {
            lr0,
            decay_factor: 1.0,
            decay_period: 0,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if self.decay_period == 0 {
            return self.lr0;
        }
        self.lr0 * libm::pow(self.decay_factor, (epoch / self.decay_period) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_update_without_momentum() {
        let mut p = [1.0, -2.0];
        let mut v = [0.0, 0.0];
        sgd_step(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, [1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = [3.0, 4.0];
        let mut v = [0.0; 2];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, [3.0, 4.0]);
    }

    #[test]
    fn momentum_two_steps_closed_form() {
        let (lr, g) = (0.01, 0.7);
        let mut p = [0.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0).unwrap();
        // v1 = g, v2 = 0.9 g + g; displacement lr (1 + 1.9) g
        approx::assert_relative_eq!(-p[0], lr * 2.9 * g, max_relative = 1e-15);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = [2.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.5, 0.0, 0.1).unwrap();
        assert_eq!(p, [2.0 - 0.5 * 0.2]);
        assert!(sgd_step(&mut p, &[0.0, 1.0], &mut v, 0.5, 0.0, 0.1).is_err());
    }

    #[test]
    fn step_schedule() {
        let s = LrSchedule {
            lr0: 0.01,
            decay_factor: 0.1,
            decay_period: 60,
        };
        assert_eq!(s.lr(0), 0.01);
        assert_eq!(s.lr(59), 0.01);
        approx::assert_relative_eq!(s.lr(60), 0.001, max_relative = 1e-15);
        approx::assert_relative_eq!(s.lr(125), 0.0001, max_relative = 1e-12);
        assert_eq!(LrSchedule::constant(0.01).lr(49), 0.01);
    }
}
