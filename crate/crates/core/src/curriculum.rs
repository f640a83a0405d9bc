//! Progressive multi-task training.
//!
//! Starting from the complete records, each difficulty level `d` trains an
//! interpolation phase (d masked intermediate points), imputes the records
//! missing exactly `d` intermediate points, trains an extrapolation phase
//! (d masked final points) and imputes the records missing exactly the last
//! `d` points. Imputed records join the training pool for later phases.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{stratum_of, Flag, Stratum, TrajectoryRecord, GRID_LEN, MAX_GAP};
use crate::diffusion::{ConditionSequence, DiffusionModel, TaskMode, TrainExample};
use crate::error::{Error, Result};
use crate::seed::{self, stream, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub max_difficulty: usize,
    /// Epochs per phase at d = 1.
    pub epochs_start: usize,
    /// Epochs per phase at d = max_difficulty.
    pub epochs_end: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            max_difficulty: 4,
            epochs_start: 20,
            epochs_end: 10,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..GRID_LEN).contains(&self.max_difficulty) {
            return Err(Error::Config(format!(
                "curriculum: max_difficulty {} not in 1..={}",
                self.max_difficulty,
                GRID_LEN - 1
            )));
        }
        Ok(())
    }

    /// Linear ramp from `epochs_start` to `epochs_end`.
    pub fn epochs_for(&self, d: usize) -> usize {
        if self.max_difficulty <= 1 {
            return self.epochs_start;
        }
        let f = (d - 1) as f64 / (self.max_difficulty - 1) as f64;
        (self.epochs_start as f64 + f * (self.epochs_end as f64 - self.epochs_start as f64)).round() as usize
    }
}

/// Training-stage ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSwitches {
    pub interpolation_task: bool,
    pub interpolation_aug: bool,
    pub extrapolation_task: bool,
    pub extrapolation_aug: bool,
}

impl Default for StageSwitches {
    fn default() -> Self {
        Self {
            interpolation_task: true,
            interpolation_aug: true,
            extrapolation_task: true,
            extrapolation_aug: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Interpolation,
    Extrapolation,
}

/// One augmented record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationEvent {
    pub record_id: String,
    pub phase: Phase,
    pub d: usize,
    pub imputed_positions: Vec<usize>,
}

/// One train-then-augment phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub index: usize,
    pub phase: Phase,
    pub d: usize,
    pub epochs: usize,
    pub trained: bool,
    pub mean_loss: f64,
    pub pool_before: usize,
    pub pool_after: usize,
    pub imputed_records: usize,
}

#[derive(Debug, Clone)]
pub struct CurriculumState {
    /// Active training pool.
    pub pool: Vec<TrajectoryRecord>,
    pub difficulty: usize,
    pub max_difficulty: usize,
    pub phase: Phase,
    pub epochs_run: usize,
    pub augmentation_log: Vec<AugmentationEvent>,
    pub phases: Vec<PhaseSummary>,
}

/// Records with all six positions present.
pub fn select_complete(original: &[TrajectoryRecord]) -> Vec<TrajectoryRecord> {
    let pool: Vec<TrajectoryRecord> = original.iter().filter(|r| r.is_complete()).cloned().collect();
    if pool.is_empty() {
        log::warn!("no complete records; training starts from augmentation only");
    }
    pool
}

/// Draw a size-`d` subset of {1..4} and a target from it.
pub fn interpolation_draw(d: usize, rng: &mut Rng) -> (Vec<usize>, usize) {
    let mut s: Vec<usize> = sample_indices(rng, MAX_GAP, d.min(MAX_GAP)).into_iter().map(|i| i + 1).collect();
    s.sort_unstable();
    let target = s[rng.random_range(0..s.len())];
    (s, target)
}

/// Target in the masked suffix {6-d..5}.
pub fn extrapolation_draw(d: usize, rng: &mut Rng) -> usize {
    rng.random_range(GRID_LEN - d.min(GRID_LEN - 1)..GRID_LEN)
}

fn interpolation_condition(record: &TrajectoryRecord, d: usize, rng: &mut Rng) -> Result<ConditionSequence> {
    let (subset, target) = interpolation_draw(d, rng);
    let mut masked = [false; GRID_LEN];
    for (pos, m) in masked.iter_mut().enumerate() {
        *m = !record.is_present(pos) || subset.contains(&pos);
    }
    ConditionSequence::with_mask(record, target, masked)
}

fn run_epochs(
    model: &mut DiffusionModel,
    pool: &[TrajectoryRecord],
    epochs: usize,
    batch_size: usize,
    rng: &mut Rng,
    mut condition: impl FnMut(&TrajectoryRecord, &mut Rng) -> Result<ConditionSequence>,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let (mut total, mut batches) = (0.0, 0usize);
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let mut batch: Vec<TrainExample> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let cond = condition(&pool[i], rng)?;
                batch.push(model.draw_example(&pool[i], cond, rng));
            }
            total += model.train_batch(&batch)?;
            batches += 1;
        }
    }
    Ok(if batches > 0 { total / batches as f64 } else { f64::NAN })
}

/// Train on `pool` with `d` random intermediate points masked per draw.
pub fn train_interpolation_phase(
    model: &mut DiffusionModel,
    pool: &[TrajectoryRecord],
    d: usize,
    epochs: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if d == 0 || d > MAX_GAP {
        return Err(Error::OutOfRange(format!("interpolation difficulty {d}")));
    }
    run_epochs(model, pool, epochs, batch_size, rng, |r, rng| interpolation_condition(r, d, rng))
}

/// Train on `pool` predicting a target in the final `d` points, with the
/// target and everything after it masked.
pub fn train_extrapolation_phase(
    model: &mut DiffusionModel,
    pool: &[TrajectoryRecord],
    d: usize,
    epochs: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if d == 0 || d >= GRID_LEN {
        return Err(Error::OutOfRange(format!("extrapolation difficulty {d}")));
    }
    run_epochs(model, pool, epochs, batch_size, rng, |r, rng| {
        let target = extrapolation_draw(d, rng);
        ConditionSequence::build(r, target, TaskMode::Extrapolation)
    })
}

fn impute_positions(model: &DiffusionModel, record: &TrajectoryRecord, mode: TaskMode, seed: u64) -> Result<TrajectoryRecord> {
    let mut out = record.clone();
    let key = seed::key_of(&record.patient_id);
    for pos in record.absent_positions() {
        let cond = ConditionSequence::build(&out, pos, mode)?;
        let mut rng = seed::rng_for(seed, &[stream::IMPUTE, key, pos as u64]);
        let z = model.sample(&cond, &mut rng)?;
        out.set_imputed(pos, z);
    }
    Ok(out)
}

fn impute_stratum(
    model: &DiffusionModel,
    original: &[TrajectoryRecord],
    stratum: Stratum,
    mode: TaskMode,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>> {
    original
        .par_iter()
        .filter(|r| stratum_of(r) == Some(stratum))
        .map(|r| impute_positions(model, r, mode, seed))
        .collect()
}

/// Complete every record missing exactly `d` intermediate points, filling
/// them in increasing position order.
pub fn impute_intermediate(model: &DiffusionModel, original: &[TrajectoryRecord], d: usize, seed: u64) -> Result<Vec<TrajectoryRecord>> {
    impute_stratum(model, original, Stratum::Intermediate(d), TaskMode::Interpolation, seed)
}

/// Complete every record missing exactly the final `d` points, earliest
/// first.
pub fn impute_final(model: &DiffusionModel, original: &[TrajectoryRecord], d: usize, seed: u64) -> Result<Vec<TrajectoryRecord>> {
    impute_stratum(model, original, Stratum::Final(d), TaskMode::Extrapolation, seed)
}

fn augment(state: &mut CurriculumState, records: Vec<TrajectoryRecord>, phase: Phase, d: usize) {
    for r in records {
        let imputed_positions = (0..GRID_LEN).filter(|&p| r.flags[p] == Flag::Imputed).collect();
        state.augmentation_log.push(AugmentationEvent {
            record_id: r.patient_id.clone(),
            phase,
            d,
            imputed_positions,
        });
        state.pool.push(r);
    }
}

/// Run the full schedule `d = 1..=max_difficulty`.
pub fn run_curriculum(
    model: &mut DiffusionModel,
    original: &[TrajectoryRecord],
    config: &CurriculumConfig,
    switches: StageSwitches,
    batch_size: usize,
    seed: u64,
) -> Result<CurriculumState> {
    config.validate()?;
    let mut state = CurriculumState {
        pool: select_complete(original),
        difficulty: 1,
        max_difficulty: config.max_difficulty,
        phase: Phase::Interpolation,
        epochs_run: 0,
        augmentation_log: Vec::new(),
        phases: Vec::new(),
    };
    let mut phase_index = 0usize;
    for d in 1..=config.max_difficulty {
        state.difficulty = d;
        let epochs = config.epochs_for(d);
        for phase in [Phase::Interpolation, Phase::Extrapolation] {
            let (task, aug) = match phase {
                Phase::Interpolation => (switches.interpolation_task && d <= MAX_GAP, switches.interpolation_aug),
                Phase::Extrapolation => (switches.extrapolation_task, switches.extrapolation_aug),
            };
            if !task {
                continue;
            }
            state.phase = phase;
            let pool_before = state.pool.len();
            let mut rng = seed::rng_for(seed, &[stream::TRAIN, phase_index as u64]);
            let mean_loss = if state.pool.is_empty() {
                log::warn!("{phase:?} d={d}: empty pool, skipping training");
                f64::NAN
            } else {
                match phase {
                    Phase::Interpolation => train_interpolation_phase(model, &state.pool, d, epochs, batch_size, &mut rng)?,
                    Phase::Extrapolation => train_extrapolation_phase(model, &state.pool, d, epochs, batch_size, &mut rng)?,
                }
            };
            state.epochs_run += epochs;
            let imputed = if aug {
                let recs = match phase {
                    Phase::Interpolation => impute_intermediate(model, original, d, seed)?,
                    Phase::Extrapolation => impute_final(model, original, d, seed)?,
                };
                let n = recs.len();
                augment(&mut state, recs, phase, d);
                n
            } else {
                0
            };
            log::info!(
                "phase {phase_index} {phase:?} d={d}: loss {mean_loss:.4}, pool {pool_before} -> {}",
                state.pool.len()
            );
            state.phases.push(PhaseSummary {
                index: phase_index,
                phase,
                d,
                epochs,
                trained: !state.pool.is_empty() || pool_before > 0,
                mean_loss,
                pool_before,
                pool_after: state.pool.len(),
                imputed_records: imputed,
            });
            phase_index += 1;
        }
    }
    Ok(state)
}
