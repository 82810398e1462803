use std::f64::consts::PI;

use crate::autograd::Tensor;

/// Heavy-ball SGD: `v = momentum * v + g`, `p -= lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumSgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl MomentumSgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `grad` is the flat gradient in the same order as `params`.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grad: &[f64], lr: f64) {
        if self.velocity.len() != grad.len() {
            self.velocity = vec![0.0; grad.len()];
        }
        for (v, g) in self.velocity.iter_mut().zip(grad) {
            *v = self.momentum * *v + g;
        }
        if lr == 0.0 {
            return;
        }
        let mut off = 0;
        for p in params {
            for x in p.data_mut() {
                *x -= lr * self.velocity[off];
                off += 1;
            }
        }
    }
}

/// Learning rate at `epoch` of `epochs` under half-cosine decay to zero.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.01, 0, 10), 0.01);
        assert!((cosine_lr(0.01, 5, 10) - 0.005).abs() < 1e-15);
        assert!(cosine_lr(0.01, 9, 10) > 0.0);
    }

    #[test]
    fn momentum_accumulates() {
        let mut t = Tensor::vector(vec![1.0]);
        let mut opt = MomentumSgd::new(0.1, 0.9);
        opt.step(vec![&mut t], &[1.0], 0.1);
        assert!((t.data()[0] - 0.9).abs() < 1e-15);
        opt.step(vec![&mut t], &[1.0], 0.1);
        assert!((t.data()[0] - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_leaves_params() {
        let mut t = Tensor::vector(vec![1.0, 2.0]);
        let mut opt = MomentumSgd::new(0.0, 0.9);
        for _ in 0..5 {
            opt.step(vec![&mut t], &[3.0, -1.0], 0.0);
        }
        assert_eq!(t.data(), &[1.0, 2.0]);
    }
}
