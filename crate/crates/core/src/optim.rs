//! Stochastic gradient descent with heavy-ball momentum.

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// `v ← momentum·v + g; p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self { lr, momentum, velocity: Vec::new() })
    }

    /// Applies one update. `grads[i]` must be present for every parameter.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&[f64]>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::MissingGradient(grads.len()));
        }
        if let Some(i) = grads.iter().position(Option::is_none) {
            return Err(Error::MissingGradient(i));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g.unwrap();
            if g.len() != p.numel() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    detail: format!("gradient of length {} for {:?}", g.len(), p.shape()),
                });
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(p0: f64, grads: &[f64], lr: f64, momentum: f64) -> f64 {
        let mut p = vec![Tensor::scalar(p0)];
        let mut opt = Sgd::new(lr, momentum).unwrap();
        for g in grads {
            opt.step(&mut p, &[Some(&[*g][..])]).unwrap();
        }
        p[0].data()[0]
    }

    #[test]
    fn plain_step() {
        assert_eq!(run(1.0, &[2.0], 0.5, 0.0), 0.0);
    }

    #[test]
    fn zero_gradient_is_identity() {
        assert_eq!(run(0.37, &[0.0, 0.0], 0.3, 0.9), 0.37);
    }

    #[test]
    fn momentum_two_steps() {
        // v1 = 1, p1 = -0.1; v2 = 1.9, p2 = -0.1 - 0.19
        assert!((run(0.0, &[1.0, 1.0], 0.1, 0.9) - (-0.29)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient() {
        let mut p = vec![Tensor::scalar(0.0), Tensor::scalar(1.0)];
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        assert!(matches!(opt.step(&mut p, &[Some(&[1.0][..]), None]), Err(Error::MissingGradient(1))));
    }
}
