use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("optimizer.{name} must lie in [0, 1), got {b}")));
            }
        }
        for (name, x) in [
            ("eps", self.eps),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::Config(format!("optimizer.{name} must be non-negative, got {x}")));
            }
        }
        Ok(())
    }
}

/// First and second moments for every parameter, plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub updates: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            updates: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Clips `grads` to the configured global norm and applies one AdamW update.
    /// Returns the norm before clipping.
    pub fn apply(&mut self, cfg: &AdamWConfig, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64) -> f64 {
        assert_eq!(params.len(), grads.len());
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        self.updates += 1;
        let t = self.updates as i32;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = (1.0 - cfg.beta1.powi(t)) as f32;
        let c2 = (1.0 - cfg.beta2.powi(t)) as f32;
        let (lr32, eps, scale) = (lr as f32, cfg.eps as f32, scale as f32);
        let decay = (lr * cfg.weight_decay) as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decays = p.ndim() == 2;
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                if decays {
                    p[i] -= decay * p[i];
                }
                p[i] -= lr32 * step;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap()];
        let grads = vec![Tensor::new(vec![3], vec![0.3f32, -0.1, 0.0]).unwrap()];
        let mut st = OptimizerState::new(&params);
        let cfg = AdamWConfig {
            grad_clip: 0.0,
            ..Default::default()
        };
        st.apply(&cfg, &mut params, &grads, 0.01);
        let p = params[0].data();
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] + 1.99).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut params = vec![Tensor::<f32>::zeros(&[2])];
        let grads = vec![Tensor::new(vec![2], vec![30.0f32, 40.0]).unwrap()];
        let mut st = OptimizerState::new(&params);
        let norm = st.apply(&AdamWConfig::default(), &mut params, &grads, 0.0);
        assert_eq!(norm, 50.0);
        // the stored moment is the clipped gradient
        assert!((st.m[0].data()[0] - 0.1 * 0.6).abs() < 1e-6);
    }

    #[test]
    fn decay_spares_vectors() {
        let mut params = vec![Tensor::<f32>::full(&[2, 2], 1.0), Tensor::<f32>::full(&[2], 1.0)];
        let grads = vec![Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])];
        let mut st = OptimizerState::new(&params);
        st.apply(&AdamWConfig::default(), &mut params, &grads, 0.5);
        assert!((params[0].data()[0] - 0.95).abs() < 1e-7);
        assert_eq!(params[1].data()[0], 1.0);
    }
}
