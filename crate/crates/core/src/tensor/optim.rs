use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64 },
    RmsProp { alpha: f64 },
}

/// Adam or RMSProp with per-parameter moment buffers, created lazily on the
/// first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, epsilon: f64) -> Self {
        OptimizerState {
            kind,
            learning_rate,
            epsilon,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerState::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
            },
            learning_rate,
            1e-8,
        )
    }

    /// RMSProp with α = 0.99, ε = 1e-5.
    pub fn rmsprop(learning_rate: f64) -> Self {
        OptimizerState::new(OptimizerKind::RmsProp { alpha: 0.99 }, learning_rate, 1e-5)
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Shape(format!(
                    "parameter {i} has {} values but its gradient has {}",
                    p.len(),
                    g.len()
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::Shape(
                "optimizer buffers do not match the parameter set".into(),
            ));
        }

        self.step += 1;
        let lr = self.learning_rate;
        let eps = self.epsilon;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2 } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut().zip(self.second.iter_mut()))
                {
                    for (k, w) in p.data_mut().iter_mut().enumerate() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::RmsProp { alpha } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(self.second.iter_mut()) {
                    for (k, w) in p.data_mut().iter_mut().enumerate() {
                        v[k] = alpha * v[k] + (1.0 - alpha) * g[k] * g[k];
                        *w -= lr * g[k] / (v[k].sqrt() + eps);
                    }
                }
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
        let mut p = vec![Tensor::vector(vec![0.5, -1.0])];
        let before = p.clone();
        let mut opt = OptimizerState::adam(0.1);
        opt.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias-corrected both become 1.
        let mut p = vec![Tensor::vector(vec![0.0])];
        let mut opt = OptimizerState::adam(0.1);
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_first_step() {
        let mut p = vec![Tensor::vector(vec![0.0])];
        let mut opt = OptimizerState::rmsprop(0.01);
        opt.step(&mut p, &[vec![2.0]]).unwrap();
        // v = 0.01 * 4 = 0.04
        let expected = -0.01 * 2.0 / (0.2 + 1e-5);
        assert!((p[0].data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut p = vec![Tensor::vector(vec![0.3, 0.7])];
            let mut opt = OptimizerState::adam(0.01);
            for _ in 0..3 {
                opt.step(&mut p, &[vec![0.2, -0.9]]).unwrap();
            }
            (p, opt)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut opt = OptimizerState::adam(0.1);
        assert!(matches!(opt.step(&mut p, &[vec![1.0]]), Err(Error::Shape(_))));
        assert!(matches!(opt.step(&mut p, &[]), Err(Error::Shape(_))));
    }
}
