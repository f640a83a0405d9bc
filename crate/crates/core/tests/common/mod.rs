#![allow(dead_code)]

use rand::Rng as _;
use trajdiff::numkernel::Tensor;
use trajdiff::seed;

/// Relative error with a floor on the denominator: below ~1e-6 the central
/// difference itself is only good to about 1e-11 absolute, so tiny gradients
/// are compared on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference check of `loss` at `n` random parameter coordinates.
/// Returns the worst relative error.
pub fn fd_check<P, L>(params: &P, n: usize, seed_value: u64, h: f64, get_mut: fn(&mut P) -> Vec<&mut Tensor>, loss: L) -> f64
where
    P: Clone,
    L: Fn(&P) -> (f64, Vec<Tensor>),
{
    let (_, grads) = loss(params);
    let sizes: Vec<usize> = grads.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = seed::rng(seed_value);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let eval = |delta: f64| {
            let mut p = params.clone();
            get_mut(&mut p)[which].data_mut()[flat] += delta;
            loss(&p).0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max(rel_err(grads[which].data()[flat], numeric));
    }
    worst
}

use rand_distr::StandardNormal;
use trajdiff::classify::classifier_loss;
use trajdiff::cohort::{apply_stratum, simulate_patient, CohortConfig, Label, Stratum, TrajectoryRecord};
use trajdiff::diffusion::{batch_loss, ConditionSequence, DenoiserParams, DenoiserShape, NoiseSchedule, TaskMode, TrainExample};
use trajdiff::guidance::{scorer_loss, ScorerParams, TokenSequence};
use trajdiff::numkernel::randn;

pub const FD_COORDS: usize = 100;
pub const FD_STEP: f64 = 1e-5;

/// A few default-cohort patients, some with missing visits.
pub fn toy_records(n: usize, seed_value: u64) -> Vec<TrajectoryRecord> {
    let config = CohortConfig::default();
    let mut rng = seed::rng(seed_value);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Pmci } else { Label::Smci };
            let (r, _) = simulate_patient(&config, format!("T{i:03}"), label, &mut rng);
            match i % 3 {
                0 => r,
                1 => apply_stratum(&r, Stratum::Intermediate(1 + i % 4), &mut rng),
                _ => apply_stratum(&r, Stratum::Final(1 + i % 4), &mut rng),
            }
        })
        .collect()
}

fn denoiser_mut(p: &mut DenoiserParams) -> Vec<&mut Tensor> {
    p.tensors_mut()
}

pub fn denoiser_fd_worst() -> f64 {
    let records = toy_records(8, 21);
    let mut rng = seed::rng(22);
    let params = DenoiserParams::init(DenoiserShape { latent_dim: 16, hidden: 32 }, &mut rng).unwrap();
    let schedule = NoiseSchedule::new(40, 1e-3, 0.2).unwrap();
    let mut batch = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let mode = if i % 2 == 0 { TaskMode::Interpolation } else { TaskMode::Extrapolation };
        let hi = if mode == TaskMode::Interpolation { 4 } else { 5 };
        let Some(target) = (1..=hi).find(|&p| r.is_present(p) && (p + i) % 2 == 0).or((1..=hi).find(|&p| r.is_present(p))) else {
            continue;
        };
        let cond = ConditionSequence::build(r, target, mode).unwrap();
        let epsilon = (0..16).map(|_| rng.sample(StandardNormal)).collect();
        batch.push(TrainExample {
            record: r,
            cond,
            t: 1 + (7 * i) % 40,
            epsilon,
        });
    }
    assert!(batch.len() >= 4);
    fd_check(&params, FD_COORDS, 23, FD_STEP, denoiser_mut, |p| batch_loss(p, &schedule, &batch).unwrap())
}

fn scorer_mut(p: &mut ScorerParams) -> Vec<&mut Tensor> {
    vec![&mut p.embed, &mut p.head, &mut p.bias]
}

pub fn scorer_fd_worst() -> f64 {
    let (dims, bins) = (4, 6);
    let mut rng = seed::rng(31);
    let mut params = ScorerParams::init(dims, dims * bins, 8, 3, &mut rng);
    params.bias = randn(1, 3, 0.5, &mut rng);
    let tokens: Vec<TokenSequence> = (0..40)
        .map(|_| (0..dims).map(|k| k * bins + rng.random_range(0..bins)).collect())
        .collect();
    let targets: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect()).collect();
    fd_check(&params, FD_COORDS, 32, FD_STEP, scorer_mut, |p| scorer_loss(p, &tokens, &targets).unwrap())
}

fn pair_mut(p: &mut (Tensor, Tensor)) -> Vec<&mut Tensor> {
    vec![&mut p.0, &mut p.1]
}

pub fn classifier_fd_worst() -> f64 {
    let mut rng = seed::rng(41);
    let x = randn(60, 12, 1.0, &mut rng);
    let labels: Vec<usize> = (0..60).map(|_| rng.random_range(0..2)).collect();
    let params = (randn(12, 1, 0.5, &mut rng), randn(1, 1, 0.5, &mut rng));
    fd_check(&params, FD_COORDS, 42, FD_STEP, pair_mut, |p| {
        let (l, g) = classifier_loss(&p.0, &p.1, &x, &labels, 1e-3).unwrap();
        (l, g.to_vec())
    })
}

use trajdiff::cohort::GRID_LEN;
use trajdiff::diffusion::{loss_extrapolation, predict_noise};

/// Perturb every latent at positions >= `target` (and fill record-absent
/// slots with junk), then compare ε̂ and the extrapolation loss bit for bit.
/// The loss keeps the ground truth at `target` itself, since that is what it
/// is measured against.
pub fn extrapolation_mask_trial(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    record: &TrajectoryRecord,
    target: usize,
    rng: &mut seed::Rng,
) -> bool {
    let d = record.latent_dim();
    let t = rng.random_range(1..=schedule.steps());
    let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let z_t: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let junk = |rng: &mut seed::Rng| -> Vec<f64> { (0..d).map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal)).collect() };

    let cond = ConditionSequence::build(record, target, TaskMode::Extrapolation).unwrap();
    let eps_hat = predict_noise(params, &z_t, &cond, t).unwrap();
    let k = GRID_LEN - target;
    let loss = loss_extrapolation(params, schedule, record, k, target, t, &eps).unwrap().0;

    let mut for_eps = record.clone();
    let mut for_loss = record.clone();
    for p in 1..GRID_LEN {
        if p >= target || !record.is_present(p) {
            for_eps.latents[p] = Some(junk(rng));
        }
        if p > target || !record.is_present(p) {
            for_loss.latents[p] = Some(junk(rng));
        }
    }
    let cond2 = ConditionSequence::build(&for_eps, target, TaskMode::Extrapolation).unwrap();
    let eps_hat2 = predict_noise(params, &z_t, &cond2, t).unwrap();
    let loss2 = loss_extrapolation(params, schedule, &for_loss, k, target, t, &eps).unwrap().0;

    let same_eps = eps_hat.iter().zip(&eps_hat2).all(|(a, b)| a.to_bits() == b.to_bits());
    same_eps && loss.to_bits() == loss2.to_bits()
}

/// Records that have ground truth at every position from 1 up to some target.
pub fn extrapolation_target(record: &TrajectoryRecord, rng: &mut seed::Rng) -> Option<usize> {
    let choices: Vec<usize> = (1..GRID_LEN).filter(|&p| record.is_present(p)).collect();
    (!choices.is_empty()).then(|| choices[rng.random_range(0..choices.len())])
}
