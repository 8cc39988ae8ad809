//! Adaptive moment estimation over a list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state; moments are kept per tensor in parameter order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Adam {
            config,
            m: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let c1 = 1.0 - b1.powf(self.step as f64);
        let c2 = 1.0 - b2.powf(self.step as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.dim() != g.dim() || p.dim() != m.dim() {
                return Err(Error::Shape(format!(
                    "parameter {:?} with gradient {:?}",
                    p.dim(),
                    g.dim()
                )));
            }
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    if lr != 0.0 {
                        *p -= update;
                    }
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_is_learning_rate_times_sign() {
        let mut p = array![[1.0, -2.0, 0.5]];
        let g = array![[3.0, -0.2, 1e-3]];
        let mut adam = Adam::new(AdamConfig::default(), &[(1, 3)]);
        let before = p.clone();
        adam.step(&mut [&mut p], &[g.clone()]).unwrap();
        for i in 0..3 {
            let delta = before[[0, i]] - p[[0, i]];
            let expect = 5e-4 * g[[0, i]].signum();
            assert!((delta - expect).abs() < 0.01 * 5e-4, "{delta} vs {expect}");
        }
    }

    #[test]
    fn zero_rate_leaves_parameters_bit_exact() {
        let mut p = array![[0.1, 0.2]];
        let before = p.clone();
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &[(1, 2)]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[array![[1.0, -1.0]]]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = array![[3.0]];
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &[(1, 1)]);
        for _ in 0..2000 {
            let g = p.mapv(|x| 2.0 * (x - 1.0));
            adam.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!((p[[0, 0]] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn mismatched_lists_are_rejected() {
        let mut p = array![[0.0]];
        let mut adam = Adam::new(AdamConfig::default(), &[(1, 1), (1, 1)]);
        assert!(adam.step(&mut [&mut p], &[array![[1.0]]]).is_err());
    }
}
