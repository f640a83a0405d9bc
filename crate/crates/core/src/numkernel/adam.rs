use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state, one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one bias-corrected update. Non-finite gradients abort before any
    /// parameter is touched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{} params, {} grads, {} slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient for parameter {i}")));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
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
    fn zero_gradient_is_fixed_point() {
        let mut p = Tensor::matrix(1, 3, vec![1.0, -2.0, 3.5]).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[Tensor::zeros(&[1, 3])]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 5);
    }

    /// Scalar reference written straight from the update rule.
    fn scalar_adam(w0: f64, grads: &[f64], c: AdamConfig) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            w -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        w
    }

    #[test]
    fn matches_scalar_reference() {
        let c = AdamConfig { lr: 0.01, ..Default::default() };
        let gs = [0.3, -1.2, 0.7, 2.0];
        let mut p = Tensor::scalar(0.5);
        let mut opt = Adam::new(c, &[&p]);
        for &g in &gs {
            opt.step(&mut [&mut p], &[Tensor::scalar(g)]).unwrap();
        }
        assert!((p.data()[0] - scalar_adam(0.5, &gs, c)).abs() < 1e-15);
        // first step moves by ~lr against the gradient sign
        let mut q = Tensor::scalar(0.0);
        let mut opt = Adam::new(c, &[&q]);
        opt.step(&mut [&mut q], &[Tensor::scalar(4.0)]).unwrap();
        assert!((q.data()[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn rejects_mismatch_and_nan() {
        let mut p = Tensor::scalar(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(&[2])]).is_err());
        assert!(matches!(
            opt.step(&mut [&mut p], &[Tensor::scalar(f64::NAN)]),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(opt.step_count(), 0);
    }
}
