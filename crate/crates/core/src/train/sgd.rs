use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Heavy-ball SGD with coupled weight decay:
/// `v = momentum * v + grad + wd * p`, then `p -= lr * v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
    skipped: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
            skipped: 0,
        }
    }

    /// Steps skipped because a gradient was non-finite.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Returns `false` (and leaves everything untouched) when a gradient is non-finite.
    pub fn step(&mut self, params: Vec<&mut [T]>, grads: &[&[T]], lr: f64) -> Result<bool> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::shape("sgd step", "parameter and gradient layouts differ"));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            self.skipped += 1;
            return Ok(false);
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![T::ZERO; g.len()]).collect();
        }
        let (mu, wd, lr) = (
            T::from_f64(self.momentum),
            T::from_f64(self.weight_decay),
            T::from_f64(lr),
        );
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pi, &gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = mu * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_steps() {
        let mut opt = Sgd::<f64>::new(0.9, 0.1);
        let mut p = vec![1.0, -2.0];
        opt.step(vec![&mut p[..]], &[&[0.5, 0.25]], 0.1).unwrap();
        // v = g + 0.1 p = [0.6, 0.05]; p -= 0.1 v
        assert!((p[0] - 0.94).abs() < 1e-15 && (p[1] + 2.005).abs() < 1e-15);
        opt.step(vec![&mut p[..]], &[&[0.0, 0.0]], 0.1).unwrap();
        // v = 0.9 * [0.6, 0.05] + 0.1 * [0.94, -2.005]
        let v = [0.54 + 0.094, 0.045 - 0.2005];
        assert!((p[0] - (0.94 - 0.1 * v[0])).abs() < 1e-15);
        assert!((p[1] - (-2.005 - 0.1 * v[1])).abs() < 1e-15);
    }

    #[test]
    fn plain_descent_and_fixed_point() {
        let mut opt = Sgd::<f64>::new(0.0, 0.0);
        let mut p = vec![3.0];
        opt.step(vec![&mut p[..]], &[&[2.0]], 0.5).unwrap();
        assert_eq!(p, vec![2.0]);
        opt.step(vec![&mut p[..]], &[&[0.0]], 0.5).unwrap();
        assert_eq!(p, vec![2.0]);
    }

    #[test]
    fn non_finite_gradient_skips_the_step() {
        let mut opt = Sgd::<f32>::new(0.9, 1e-4);
        let mut p = vec![1.0f32, 2.0];
        assert!(!opt.step(vec![&mut p[..]], &[&[f32::NAN, 0.0]], 0.1).unwrap());
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(opt.skipped(), 1);
        assert!(opt.step(vec![&mut p[..]], &[&[1.0]], 0.1).is_err());
    }
}
