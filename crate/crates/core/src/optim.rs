//! Adam with state that serializes alongside checkpoints.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Moment buffers, in parameter order.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn with_moments(mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(invalid("moment buffers disagree"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(self)
    }

    /// Applies one update. Parameter count and sizes must not change between calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(invalid("one gradient per parameter expected"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(invalid("parameter list changed between optimizer steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.numel() != g.numel() || self.m[i].len() != g.numel() {
                return Err(invalid(format!("gradient {i} has the wrong size")));
            }
            if self.lr == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut w = Tensor::new([2], vec![1.0, -1.0]);
        let g = Tensor::new([2], vec![0.5, -2.0]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut w], &[g]).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-6);
        assert!((w.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let mut w = Tensor::new([3], vec![0.1, 0.2, 0.3]);
        let before = w.clone();
        let mut opt = Adam::new(0.0);
        opt.step(&mut [&mut w], &[Tensor::full([3], 1.0)]).unwrap();
        assert!(w.bits_eq(&before));
    }

    #[test]
    fn minimizes_quadratic() {
        let mut w = Tensor::new([1], vec![3.0]);
        let mut opt = Adam::new(0.05);
        for _ in 0..500 {
            let g = w.map(|v| 2.0 * v);
            opt.step(&mut [&mut w], &[g]).unwrap();
        }
        assert!(w.data()[0].abs() < 0.05);
    }
}
