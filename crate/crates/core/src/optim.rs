//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state with zeroed moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        AdamState {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return shape_err(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.first[i].len() || grads[i].is_some_and(|g| g.numel() != p.numel())
            {
                return shape_err(format!("adam: tensor {i} changed shape"));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let g = grads[i].map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        let g = Tensor::zeros(&[3]);
        for _ in 0..5 {
            st.step(&mut [&mut p], &[Some(&g)]).unwrap();
        }
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(0.5);
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut st = AdamState::new(cfg, &[&p]);
        st.step(&mut [&mut p], &[Some(&Tensor::scalar(3.7))])
            .unwrap();
        assert!((0.5 - p.item() - 0.01).abs() < 1e-9);
    }

    /// Independent scalar Adam used as the trajectory oracle.
    fn scalar_adam(x0: f64, grad: impl Fn(f64) -> f64, steps: usize, cfg: AdamConfig) -> f64 {
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=steps {
            let g = grad(x);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v / (1.0 - cfg.beta2.powi(t as i32));
            x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        x
    }

    #[test]
    fn quadratic_trajectory_matches_scalar_reference() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let grad = |x: f64| 2.0 * (x - 3.0);
        let mut p = Tensor::scalar(-1.0);
        let mut st = AdamState::new(cfg, &[&p]);
        for _ in 0..10 {
            let g = Tensor::scalar(grad(p.item()));
            st.step(&mut [&mut p], &[Some(&g)]).unwrap();
        }
        let expected = scalar_adam(-1.0, grad, 10, cfg);
        assert_eq!(p.item().to_bits(), expected.to_bits());
        assert_eq!(st.steps(), 10);
    }
}
