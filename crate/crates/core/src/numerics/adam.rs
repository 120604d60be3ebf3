//! Bias-corrected Adam.

use alloc::format;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!(
                "adam learning rate must be positive, got {}",
                config.lr
            )));
        }
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    /// Applies one update to every parameter in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - libm::pow(beta1 as f64, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2 as f64, self.step as f64);
        let (bc1, bc2) = (bc1 as f32, bc2 as f32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            p.expect_same_shape(g, "adam_step")?;
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pi, &gi), (mi, vi)) in it {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (libm::sqrtf(vhat) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![Tensor::new(&[3], vec![1.0, 1.0, 1.0]).unwrap()];
        let g = vec![Tensor::new(&[3], vec![0.3, -5.0, 0.0]).unwrap()];
        let mut st = AdamState::new(AdamConfig::with_lr(0.01), &p).unwrap();
        st.step(&mut p, &g).unwrap();
        let d = p[0].data();
        assert!((d[0] - 0.99).abs() < 1e-6);
        assert!((d[1] - 1.01).abs() < 1e-6);
        assert_eq!(d[2], 1.0);
        assert_eq!(st.step, 1);
        assert!(st.v[0].data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_fn(&[2, 2], |i| i as f32)];
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), &p).unwrap();
        for _ in 0..3 {
            st.step(&mut p, &[Tensor::zeros(&[2, 2])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn descends_a_one_dimensional_bowl() {
        // loss = 0.5 * a * theta^2, gradient a * theta
        let a = 2.0f32;
        let mut p = vec![Tensor::scalar(1.5)];
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &p).unwrap();
        let loss = |t: f32| 0.5 * a * t * t;
        let l0 = loss(p[0].data()[0]);
        for _ in 0..2 {
            let g = Tensor::scalar(a * p[0].data()[0]);
            st.step(&mut p, &[g]).unwrap();
        }
        // Hand simulation in f64: 1.5 -> 1.4 -> 1.3002391.
        let theta = p[0].data()[0];
        assert!((theta - 1.300_239_1).abs() < 2e-6, "theta {theta}");
        assert!(loss(theta) < l0);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        assert!(AdamState::new(AdamConfig::with_lr(0.0), &[]).is_err());
    }
}
