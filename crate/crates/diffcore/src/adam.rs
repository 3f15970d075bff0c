//! Bias-corrected Adam.

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state; moments are kept per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = |p: &Tensor<T>| Tensor::zeros(p.shape());
        Self {
            config,
            step_count: 0,
            first_moment: params.iter().map(zeros).collect(),
            second_moment: params.iter().map(zeros).collect(),
        }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(DiffError::Invalid {
                op: "adam_step",
                detail: format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(DiffError::Shape {
                    op: "adam_step",
                    detail: format!("parameter {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let bias1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bias2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.learning_rate);
        let eps = T::from_f64_lossy(c.epsilon);
        let one = T::one();
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![t(&[1.0, -2.0, 3.5])];
        let before = params.clone();
        let mut state = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..3 {
            state.step(&mut params, &[t(&[0.0; 3])]).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.step_count, 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        let cfg = AdamConfig::default();
        let g = [0.3, -4.0, 1e-3];
        let mut params = vec![t(&[0.0; 3])];
        let mut state = AdamState::new(cfg, &params);
        state.step(&mut params, &[t(&g)]).unwrap();
        for (&p, &gv) in params[0].data().iter().zip(&g) {
            let expected = -cfg.learning_rate * gv / (gv.abs() + cfg.epsilon);
            assert!((p - expected).abs() < 1e-15, "{p} vs {expected}");
            assert!((p + cfg.learning_rate * gv.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn identical_state_gives_identical_update() {
        let grads = [t(&[0.1, -0.2]), t(&[0.05, 0.7])];
        let run = || {
            let mut params = vec![t(&[1.0, 2.0])];
            let mut state = AdamState::new(AdamConfig::default(), &params);
            for g in &grads {
                state.step(&mut params, std::slice::from_ref(g)).unwrap();
            }
            (params, state)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_mismatched_grads() {
        let mut params = vec![t(&[1.0, 2.0])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        assert!(state.step(&mut params, &[t(&[1.0])]).is_err());
        assert!(state.step(&mut params, &[]).is_err());
        assert_eq!(state.step_count, 0);
    }
}
