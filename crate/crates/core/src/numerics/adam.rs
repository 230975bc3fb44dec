use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{GlnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` in place. Moments are allocated on the
    /// first call and must keep matching shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(GlnError::Dimension {
                op: "adam_step",
                left: (params.len(), 0),
                right: (grads.len(), 0),
            });
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(GlnError::Dimension {
                op: "adam_step",
                left: (self.first.len(), 0),
                right: (params.len(), 0),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(GlnError::Dimension {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_slice();
            let m = self.first[i].as_mut_slice();
            let v = self.second[i].as_mut_slice();
            for (k, w) in p.as_mut_slice().iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Matrix::filled(1, 1, 1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut p], &[Matrix::filled(1, 1, 0.5)]).unwrap();
        let update = p[(0, 0)] - 1.0;
        let expected = -3e-4 * 0.5 / (0.5 + 1e-8);
        assert!((update - expected).abs() < 1e-15);
        assert!((update + 3e-4).abs() < 1e-10);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Matrix::zeros(1, 2)]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut p = Matrix::filled(1, 1, 0.0);
        let mut adam = Adam::new(AdamConfig::default());
        let mut last = 0.0;
        for _ in 0..2 {
            adam.step(&mut [&mut p], &[Matrix::filled(1, 1, 1.0)]).unwrap();
            assert!(p[(0, 0)] < last);
            last = p[(0, 0)];
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Matrix::zeros(2, 2);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(
            adam.step(&mut [&mut p], &[Matrix::zeros(1, 2)]),
            Err(GlnError::Dimension { .. })
        ));
    }
}
