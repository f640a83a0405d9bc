//! Conditional denoising diffusion over a single target position.

mod condition;
mod denoiser;
mod schedule;

pub use condition::{sinusoidal, ConditionSequence, TaskMode};
pub use denoiser::{
    condition_preactivation, network_head, step_encoding, ConditionBatch, DenoiserParams, DenoiserShape,
    NamedTensor, NoisePredictor, ParamVars,
};
pub use schedule::{NoiseSchedule, ScheduleParams};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cohort::{TrajectoryRecord, GRID_LEN};
use crate::error::{Error, Result};
use crate::numkernel::{Adam, AdamConfig, Tape, Tensor};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub hidden: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            steps: 40,
            beta_start: 1e-3,
            beta_end: 0.2,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::new(self.steps, self.beta_start, self.beta_end)?;
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("diffusion: hidden and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("diffusion: invalid optimizer settings".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..Default::default()
        }
    }
}

/// One training draw: a condition, the diffusion step and the injected noise.
#[derive(Debug, Clone)]
pub struct TrainExample<'r> {
    pub record: &'r TrajectoryRecord,
    pub cond: ConditionSequence,
    pub t: usize,
    pub epsilon: Vec<f64>,
}

/// Mean squared noise-prediction error over a batch and its gradients, in
/// [`DenoiserParams::tensors`] order.
pub fn batch_loss(params: &DenoiserParams, schedule: &NoiseSchedule, batch: &[TrainExample<'_>]) -> Result<(f64, Vec<Tensor>)> {
    let d = params.shape.latent_dim;
    let conds: Vec<ConditionSequence> = batch.iter().map(|e| e.cond.clone()).collect();
    let cb = ConditionBatch::new(&conds, d)?;
    let mut zt = Vec::with_capacity(batch.len() * d);
    let mut steps = Vec::with_capacity(batch.len() * d);
    let mut eps = Vec::with_capacity(batch.len() * d);
    for e in batch {
        let target = e.cond.target();
        let z0 = e
            .record
            .latent(target)
            .ok_or_else(|| Error::Invalid(format!("{}: no ground truth at position {target}", e.record.patient_id)))?;
        if e.epsilon.len() != d {
            return Err(Error::shape("loss", format!("epsilon has {} dims, expected {d}", e.epsilon.len())));
        }
        zt.extend(schedule.forward_diffuse(z0, e.t, &e.epsilon)?);
        steps.extend(sinusoidal(e.t as f64, d));
        eps.extend_from_slice(&e.epsilon);
    }
    let rows = batch.len();
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let pre = condition_preactivation(&mut tape, &pv, &cb)?;
    let z = tape.constant(Tensor::matrix(rows, d, zt)?);
    let s = tape.constant(Tensor::matrix(rows, d, steps)?);
    let out = network_head(&mut tape, &pv, pre, z, s)?;
    let target = tape.constant(Tensor::matrix(rows, d, eps)?);
    let loss = tape.mse(out, target)?;
    let grads = tape.backward(loss)?;
    let gs = pv
        .all()
        .into_iter()
        .zip(params.tensors())
        .map(|(v, t)| grads.get_or_zeros(v, t))
        .collect();
    Ok((tape.value(loss).data()[0], gs))
}

/// Interpolation loss for one record with target `i` in 1..=4.
pub fn loss_interpolation(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    record: &TrajectoryRecord,
    i: usize,
    t: usize,
    epsilon: &[f64],
) -> Result<(f64, Vec<Tensor>)> {
    let cond = ConditionSequence::build(record, i, TaskMode::Interpolation)?;
    batch_loss(
        params,
        schedule,
        &[TrainExample {
            record,
            cond,
            t,
            epsilon: epsilon.to_vec(),
        }],
    )
}

/// Extrapolation loss with horizon `k`; `i` must lie in `6-k..=5`.
pub fn loss_extrapolation(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    record: &TrajectoryRecord,
    k: usize,
    i: usize,
    t: usize,
    epsilon: &[f64],
) -> Result<(f64, Vec<Tensor>)> {
    if k == 0 || k >= GRID_LEN || i < GRID_LEN - k || i >= GRID_LEN {
        return Err(Error::OutOfRange(format!("target {i} with horizon {k}")));
    }
    let cond = ConditionSequence::build(record, i, TaskMode::Extrapolation)?;
    batch_loss(
        params,
        schedule,
        &[TrainExample {
            record,
            cond,
            t,
            epsilon: epsilon.to_vec(),
        }],
    )
}

/// ε̂ for a single noisy target.
pub fn predict_noise<P: NoisePredictor>(model: &P, z_t: &[f64], cond: &ConditionSequence, t: usize) -> Result<Vec<f64>> {
    let ctx = model.prepare(std::slice::from_ref(cond))?;
    let z = Tensor::matrix(1, z_t.len(), z_t.to_vec())?;
    Ok(model.predict(&ctx, &z, t)?.into_data())
}

/// Run one reverse chain per condition. Row `r` draws every random number from
/// `rngs[r]`, so a row's output does not depend on the rest of the batch.
pub fn sample_targets<P: NoisePredictor>(
    model: &P,
    schedule: &NoiseSchedule,
    conds: &[ConditionSequence],
    rngs: &mut [Rng],
) -> Result<Vec<Vec<f64>>> {
    if conds.len() != rngs.len() {
        return Err(Error::shape("sample", format!("{} conditions, {} rngs", conds.len(), rngs.len())));
    }
    let d = model.latent_dim();
    let ctx = model.prepare(conds)?;
    let mut z: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|r| (0..d).map(|_| r.sample(StandardNormal)).collect())
        .collect();
    for t in (1..=schedule.steps()).rev() {
        let zt = Tensor::matrix(z.len(), d, z.concat())?;
        let eps = model.predict(&ctx, &zt, t)?;
        for (row, (zr, rng)) in z.iter_mut().zip(rngs.iter_mut()).enumerate() {
            *zr = schedule.denoise_step(zr, eps.row(row), t, rng)?;
        }
    }
    Ok(z)
}

pub fn sample_target<P: NoisePredictor>(model: &P, schedule: &NoiseSchedule, cond: &ConditionSequence, rng: &mut Rng) -> Result<Vec<f64>> {
    let mut rngs = [rng.clone()];
    let out = sample_targets(model, schedule, std::slice::from_ref(cond), &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().expect("one row"))
}

/// Denoiser plus its schedule and optimizer state.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    optimizer: Adam,
}

impl DiffusionModel {
    pub fn new(config: &DiffusionConfig, latent_dim: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = DenoiserParams::init(
            DenoiserShape {
                latent_dim,
                hidden: config.hidden,
            },
            rng,
        )?;
        let schedule = NoiseSchedule::new(config.steps, config.beta_start, config.beta_end)?;
        Ok(Self::from_parts(params, schedule, config.adam()))
    }

    pub fn from_parts(params: DenoiserParams, schedule: NoiseSchedule, adam: AdamConfig) -> Self {
        let optimizer = Adam::new(adam, &params.tensors());
        Self {
            params,
            schedule,
            optimizer,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.params.shape.latent_dim
    }

    /// Draw a diffusion step and noise for a condition.
    pub fn draw_example<'r>(&self, record: &'r TrajectoryRecord, cond: ConditionSequence, rng: &mut Rng) -> TrainExample<'r> {
        let t = rng.random_range(1..=self.schedule.steps());
        let epsilon = (0..self.latent_dim()).map(|_| rng.sample(StandardNormal)).collect();
        TrainExample { record, cond, t, epsilon }
    }

    /// One optimizer step on a batch; returns the batch loss.
    pub fn train_batch(&mut self, batch: &[TrainExample<'_>]) -> Result<f64> {
        let (loss, grads) = batch_loss(&self.params, &self.schedule, batch)?;
        self.optimizer.step(&mut self.params.tensors_mut(), &grads)?;
        Ok(loss)
    }

    pub fn sample(&self, cond: &ConditionSequence, rng: &mut Rng) -> Result<Vec<f64>> {
        sample_target(&self.params, &self.schedule, cond, rng)
    }

    pub fn sample_batch(&self, conds: &[ConditionSequence], rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        sample_targets(&self.params, &self.schedule, conds, rngs)
    }
}
