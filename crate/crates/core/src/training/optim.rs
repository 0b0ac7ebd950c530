use serde::{Deserialize, Serialize};

use super::rollout::Gradients;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments, one moment pair per parameter block.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, blocks: &[Matrix]) -> Self {
        let zeros = || {
            blocks
                .iter()
                .map(|b| Matrix::zeros(b.rows, b.cols))
                .collect()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, blocks: &mut [Matrix], grads: &Gradients) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (((p, g), m), v) in blocks
            .iter_mut()
            .zip(&grads.blocks)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= c.learning_rate * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_coordinate_by_about_the_learning_rate() {
        let mut p = vec![Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5])];
        let g = Gradients {
            blocks: vec![Matrix::from_vec(1, 3, vec![0.3, -40.0, 0.0])],
        };
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &g);
        assert!((p[0].data[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[0].data[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p[0].data[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Matrix::from_vec(1, 2, vec![3.0, -1.0])];
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            &p,
        );
        for _ in 0..2000 {
            let g = Gradients {
                blocks: vec![Matrix::from_vec(
                    1,
                    2,
                    p[0].data.iter().map(|x| 2.0 * x).collect(),
                )],
            };
            opt.step(&mut p, &g);
        }
        assert!(p[0].data.iter().all(|x| x.abs() < 1e-3));
    }
}
