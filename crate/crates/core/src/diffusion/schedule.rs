use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Linear β schedule with derived α and cumulative ᾱ. Steps are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion steps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            steps,
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn from_params(p: ScheduleParams) -> Result<Self> {
        Self::new(p.steps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(Error::OutOfRange(format!("diffusion step {t} not in 1..={}", self.steps)));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Posterior variance β_t(1−ᾱ_{t−1})/(1−ᾱ_t).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Closed form of the forward chain: √ᾱ_t·z0 + √(1−ᾱ_t)·ε.
    pub fn forward_diffuse(&self, z0: &[f64], t: usize, epsilon: &[f64]) -> Result<Vec<f64>> {
        let i = self.check(t)?;
        if z0.len() != epsilon.len() {
            return Err(Error::shape("forward_diffuse", format!("{} vs {}", z0.len(), epsilon.len())));
        }
        let (a, s) = (self.alpha_bar[i].sqrt(), (1.0 - self.alpha_bar[i]).sqrt());
        Ok(z0.iter().zip(epsilon).map(|(z, e)| a * z + s * e).collect())
    }

    /// Reverse-process mean μ = (z_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t.
    pub fn posterior_mean(&self, z_t: &[f64], eps_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        let i = self.check(t)?;
        if z_t.len() != eps_hat.len() {
            return Err(Error::shape("denoise_step", format!("{} vs {}", z_t.len(), eps_hat.len())));
        }
        let c = self.beta[i] / (1.0 - self.alpha_bar[i]).sqrt();
        let inv = 1.0 / self.alpha[i].sqrt();
        Ok(z_t.iter().zip(eps_hat).map(|(z, e)| inv * (z - c * e)).collect())
    }

    /// One reverse step with explicit noise `xi` (ignored at t = 1).
    pub fn denoise_step_with(&self, z_t: &[f64], eps_hat: &[f64], t: usize, xi: &[f64]) -> Result<Vec<f64>> {
        let mut mu = self.posterior_mean(z_t, eps_hat, t)?;
        if t > 1 {
            let sigma = self.posterior_variance(t).sqrt();
            for (m, x) in mu.iter_mut().zip(xi) {
                *m += sigma * x;
            }
        }
        Ok(mu)
    }

    /// One reverse step. Draws `z_t.len()` normals from `rng` only when t > 1.
    pub fn denoise_step(&self, z_t: &[f64], eps_hat: &[f64], t: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        self.check(t)?;
        let xi: Vec<f64> = if t > 1 {
            (0..z_t.len()).map(|_| rng.sample(StandardNormal)).collect()
        } else {
            Vec::new()
        };
        self.denoise_step_with(z_t, eps_hat, t, &xi)
    }
}
