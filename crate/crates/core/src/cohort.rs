//! Synthetic longitudinal cohorts on the fixed six-visit grid.
//!
//! Latents follow class-specific linear dynamics
//! `Z[τ+1] = A·Z[τ] + m·b + η`, biomarkers are a noisy linear readout
//! `y = W·Z + ν`, and missingness is assigned by pattern stratum so that every
//! augmentation stratum of the curriculum exists in the data.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream, Rng};

pub const GRID_LEN: usize = 6;
pub const VISIT_MONTHS: [u32; GRID_LEN] = [0, 6, 12, 18, 24, 36];
/// Largest number of missing visits in a stratum (positions 1..=4 or a suffix
/// of length up to 4).
pub const MAX_GAP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "pMCI")]
    Pmci,
    #[serde(rename = "sMCI")]
    Smci,
}

impl Label {
    /// Positive class is pMCI.
    pub fn is_positive(self) -> bool {
        self == Label::Pmci
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flag {
    #[serde(rename = "obs")]
    Observed,
    #[serde(rename = "imp")]
    Imputed,
}

/// One patient on the visit grid. Position 0 is the baseline and is always
/// present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub patient_id: String,
    pub label: Label,
    pub latents: Vec<Option<Vec<f64>>>,
    pub biomarkers: Vec<Option<Vec<f64>>>,
    /// File convention: 1 = present, 0 = absent.
    pub mask: Vec<u8>,
    pub flags: Vec<Flag>,
}

impl TrajectoryRecord {
    pub fn is_present(&self, pos: usize) -> bool {
        self.mask[pos] == 1
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m == 1)
    }

    pub fn absent_positions(&self) -> Vec<usize> {
        (0..GRID_LEN).filter(|&p| !self.is_present(p)).collect()
    }

    pub fn latent(&self, pos: usize) -> Option<&[f64]> {
        self.latents[pos].as_deref()
    }

    pub fn baseline(&self) -> &[f64] {
        self.latents[0].as_deref().expect("baseline is always present")
    }

    pub fn latent_dim(&self) -> usize {
        self.baseline().len()
    }

    /// Fill an absent position with a model-generated latent.
    pub fn set_imputed(&mut self, pos: usize, z: Vec<f64>) {
        debug_assert!(!self.is_present(pos));
        self.latents[pos] = Some(z);
        self.mask[pos] = 1;
        self.flags[pos] = Flag::Imputed;
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.latents.len() != GRID_LEN
            || self.biomarkers.len() != GRID_LEN
            || self.mask.len() != GRID_LEN
            || self.flags.len() != GRID_LEN
        {
            return Err(format!("every per-position field must have {GRID_LEN} entries"));
        }
        if self.latents[0].is_none() || self.mask[0] != 1 {
            return Err("baseline (position 0) must be present".into());
        }
        if self.flags[0] != Flag::Observed {
            return Err("baseline cannot be imputed".into());
        }
        let d = self.latent_dim();
        if d == 0 {
            return Err("latent dimension must be positive".into());
        }
        let mut bdim = None;
        for pos in 0..GRID_LEN {
            match self.mask[pos] {
                0 | 1 => {}
                m => return Err(format!("mask[{pos}] = {m}, expected 0 or 1")),
            }
            if self.latents[pos].is_some() != (self.mask[pos] == 1) {
                return Err(format!("mask[{pos}] disagrees with latent presence"));
            }
            if let Some(z) = &self.latents[pos] {
                if z.len() != d {
                    return Err(format!("latent at {pos} has {} dims, expected {d}", z.len()));
                }
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(format!("non-finite latent at {pos}"));
                }
            } else if self.flags[pos] == Flag::Imputed {
                return Err(format!("position {pos} flagged imputed but absent"));
            }
            if let Some(y) = &self.biomarkers[pos] {
                if self.mask[pos] != 1 {
                    return Err(format!("biomarkers at absent position {pos}"));
                }
                if *bdim.get_or_insert(y.len()) != y.len() {
                    return Err(format!("biomarker dimension changes at {pos}"));
                }
            }
        }
        Ok(())
    }
}

/// Per-class latent dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDynamics {
    pub baseline_mean: Vec<f64>,
    pub baseline_std: Vec<f64>,
    /// `A`, D×D row-major rows.
    pub drift_matrix: Vec<Vec<f64>>,
    /// `b`; each patient scales it by a magnitude drawn from `drift_magnitude`.
    pub drift_bias: Vec<f64>,
    pub drift_magnitude: [f64; 2],
    pub process_noise: f64,
}

impl ClassDynamics {
    fn validate(&self, d: usize, name: &str) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{name} dynamics: {m}")));
        if self.baseline_mean.len() != d || self.baseline_std.len() != d || self.drift_bias.len() != d {
            return bad("vector lengths must equal latent_dim");
        }
        if self.drift_matrix.len() != d || self.drift_matrix.iter().any(|r| r.len() != d) {
            return bad("drift_matrix must be latent_dim x latent_dim");
        }
        if self.baseline_std.iter().any(|&s| !(s >= 0.0)) || !(self.process_noise >= 0.0) {
            return bad("standard deviations must be >= 0");
        }
        let [lo, hi] = self.drift_magnitude;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return bad("drift_magnitude must be an ordered finite range");
        }
        Ok(())
    }

    pub fn apply(&self, z: &[f64], magnitude: f64) -> Vec<f64> {
        self.drift_matrix
            .iter()
            .zip(&self.drift_bias)
            .map(|(row, b)| row.iter().zip(z).map(|(a, v)| a * v).sum::<f64>() + magnitude * b)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingnessSpec {
    pub complete: f64,
    pub intermediate: f64,
    pub final_suffix: f64,
}

impl Default for MissingnessSpec {
    fn default() -> Self {
        Self {
            complete: 0.4,
            intermediate: 0.3,
            final_suffix: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stratum {
    Complete,
    /// `d` absent positions drawn from 1..=4.
    Intermediate(usize),
    /// The suffix `6-d..=5` is absent.
    Final(usize),
}

/// Generator parameters. The class dynamics and biomarker map are derived
/// from the scalar knobs unless given explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub latent_dim: usize,
    pub biomarker_dim: usize,
    /// Probability that a patient is pMCI.
    pub prior_pmci: f64,
    /// Number of latent directions (leading coordinates) carrying atrophy.
    pub atrophy_dims: usize,
    pub decay: f64,
    pub pmci_baseline_shift: f64,
    pub pmci_baseline_spread: f64,
    pub atrophy_drift: f64,
    pub pmci_drift_magnitude: [f64; 2],
    pub process_noise: f64,
    pub observation_noise: f64,
    pub missingness: MissingnessSpec,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pmci_dynamics: Option<ClassDynamics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smci_dynamics: Option<ClassDynamics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub biomarker_map: Option<Vec<Vec<f64>>>,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            latent_dim: 16,
            biomarker_dim: 8,
            prior_pmci: 0.4,
            atrophy_dims: 4,
            decay: 0.9,
            pmci_baseline_shift: 0.25,
            pmci_baseline_spread: 2.5,
            atrophy_drift: -0.45,
            pmci_drift_magnitude: [0.5, 1.5],
            process_noise: 0.3,
            observation_noise: 0.1,
            missingness: MissingnessSpec::default(),
            seed: 0,
            pmci_dynamics: None,
            smci_dynamics: None,
            biomarker_map: None,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("cohort: {m}")));
        if self.latent_dim == 0 || self.biomarker_dim == 0 {
            return bad("latent_dim and biomarker_dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.prior_pmci) {
            return bad(format!("prior_pmci {} outside [0,1]", self.prior_pmci));
        }
        if self.atrophy_dims > self.latent_dim {
            return bad("atrophy_dims exceeds latent_dim".into());
        }
        if !(self.process_noise >= 0.0) || !(self.observation_noise >= 0.0) || !(self.pmci_baseline_spread >= 0.0) {
            return bad("noise and spread parameters must be >= 0".into());
        }
        let MissingnessSpec { complete, intermediate, final_suffix } = self.missingness;
        let w = [complete, intermediate, final_suffix];
        if w.iter().any(|p| !(0.0..=1.0).contains(p)) || ((complete + intermediate + final_suffix) - 1.0).abs() > 1e-9 {
            return bad(format!("missingness weights {w:?} must lie in [0,1] and sum to 1"));
        }
        self.dynamics(Label::Pmci).validate(self.latent_dim, "pMCI")?;
        self.dynamics(Label::Smci).validate(self.latent_dim, "sMCI")?;
        let w = self.biomarker_map();
        if w.len() != self.biomarker_dim || w.iter().any(|r| r.len() != self.latent_dim) {
            return bad("biomarker_map must be biomarker_dim x latent_dim".into());
        }
        Ok(())
    }

    pub fn dynamics(&self, label: Label) -> ClassDynamics {
        let explicit = match label {
            Label::Pmci => &self.pmci_dynamics,
            Label::Smci => &self.smci_dynamics,
        };
        if let Some(d) = explicit {
            return d.clone();
        }
        let d = self.latent_dim;
        let atrophy = |v: f64| -> Vec<f64> { (0..d).map(|i| if i < self.atrophy_dims { v } else { 0.0 }).collect() };
        let drift_matrix = (0..d)
            .map(|i| (0..d).map(|j| if i == j { self.decay } else { 0.0 }).collect())
            .collect();
        match label {
            Label::Pmci => ClassDynamics {
                baseline_mean: atrophy(self.pmci_baseline_shift),
                baseline_std: (0..d)
                    .map(|i| if i < self.atrophy_dims { self.pmci_baseline_spread } else { 1.0 })
                    .collect(),
                drift_matrix,
                drift_bias: atrophy(self.atrophy_drift),
                drift_magnitude: self.pmci_drift_magnitude,
                process_noise: self.process_noise,
            },
            Label::Smci => ClassDynamics {
                baseline_mean: vec![0.0; d],
                baseline_std: vec![1.0; d],
                drift_matrix,
                drift_bias: vec![0.0; d],
                drift_magnitude: [1.0, 1.0],
                process_noise: self.process_noise,
            },
        }
    }

    /// `W`, B×D. Derived rows are Gaussian with variance 1/D from a fixed
    /// stream so the map is identical for every cohort seed.
    pub fn biomarker_map(&self) -> Vec<Vec<f64>> {
        if let Some(w) = &self.biomarker_map {
            return w.clone();
        }
        let mut rng = seed::rng_for(0, &[stream::MAP, self.latent_dim as u64, self.biomarker_dim as u64]);
        let s = 1.0 / (self.latent_dim as f64).sqrt();
        (0..self.biomarker_dim)
            .map(|_| (0..self.latent_dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }
}

/// Hidden per-patient quantities that are not written to the dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatientTruth {
    pub drift_magnitude: f64,
}

fn gaussian_vec(n: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn readout(w: &[Vec<f64>], z: &[f64], noise: f64, rng: &mut Rng) -> Vec<f64> {
    w.iter()
        .map(|row| {
            let clean: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
            clean + noise * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

/// Simulate one fully observed patient.
pub fn simulate_patient(
    config: &CohortConfig,
    patient_id: impl Into<String>,
    label: Label,
    rng: &mut Rng,
) -> (TrajectoryRecord, PatientTruth) {
    let dynamics = config.dynamics(label);
    let w = config.biomarker_map();
    let d = config.latent_dim;
    let [lo, hi] = dynamics.drift_magnitude;
    let magnitude = if hi > lo { rng.random_range(lo..hi) } else { lo };

    let mut latents = Vec::with_capacity(GRID_LEN);
    let z0: Vec<f64> = gaussian_vec(d, 1.0, rng)
        .iter()
        .zip(&dynamics.baseline_mean)
        .zip(&dynamics.baseline_std)
        .map(|((e, m), s)| m + s * e)
        .collect();
    latents.push(z0);
    for tau in 1..GRID_LEN {
        let noise = gaussian_vec(d, dynamics.process_noise, rng);
        let next: Vec<f64> = dynamics
            .apply(&latents[tau - 1], magnitude)
            .iter()
            .zip(&noise)
            .map(|(a, n)| a + n)
            .collect();
        latents.push(next);
    }
    let biomarkers = latents
        .iter()
        .map(|z| Some(readout(&w, z, config.observation_noise, rng)))
        .collect();
    let record = TrajectoryRecord {
        patient_id: patient_id.into(),
        label,
        latents: latents.into_iter().map(Some).collect(),
        biomarkers,
        mask: vec![1; GRID_LEN],
        flags: vec![Flag::Observed; GRID_LEN],
    };
    (record, PatientTruth { drift_magnitude: magnitude })
}

pub fn draw_stratum(spec: &MissingnessSpec, rng: &mut Rng) -> Stratum {
    let u: f64 = rng.random();
    let d = rng.random_range(1..=MAX_GAP);
    if u < spec.complete {
        Stratum::Complete
    } else if u < spec.complete + spec.intermediate {
        Stratum::Intermediate(d)
    } else {
        Stratum::Final(d)
    }
}

/// Remove visits according to a stratum. The baseline is never touched.
pub fn apply_stratum(record: &TrajectoryRecord, stratum: Stratum, rng: &mut Rng) -> TrajectoryRecord {
    let mut out = record.clone();
    let absent: Vec<usize> = match stratum {
        Stratum::Complete => Vec::new(),
        Stratum::Intermediate(d) => {
            let mut v: Vec<usize> = sample_indices(rng, MAX_GAP, d.min(MAX_GAP)).into_iter().map(|i| i + 1).collect();
            v.sort_unstable();
            v
        }
        Stratum::Final(d) => (GRID_LEN - d.min(GRID_LEN - 1)..GRID_LEN).collect(),
    };
    for p in absent {
        out.latents[p] = None;
        out.biomarkers[p] = None;
        out.mask[p] = 0;
        out.flags[p] = Flag::Observed;
    }
    out
}

/// Draw a stratum from the config weights and apply it.
pub fn apply_missingness(record: &TrajectoryRecord, config: &CohortConfig, rng: &mut Rng) -> (TrajectoryRecord, Stratum) {
    let stratum = draw_stratum(&config.missingness, rng);
    (apply_stratum(record, stratum, rng), stratum)
}

/// Classify a record's absent set into a stratum, if it matches one.
pub fn stratum_of(record: &TrajectoryRecord) -> Option<Stratum> {
    let absent = record.absent_positions();
    let d = absent.len();
    if d == 0 {
        return Some(Stratum::Complete);
    }
    if !record.is_present(GRID_LEN - 1) {
        let suffix: Vec<usize> = (GRID_LEN - d..GRID_LEN).collect();
        return (absent == suffix).then_some(Stratum::Final(d));
    }
    (d <= MAX_GAP).then_some(Stratum::Intermediate(d))
}

/// A generated patient before missingness, plus its hidden truth.
#[derive(Debug, Clone)]
pub struct SimulatedPatient {
    pub record: TrajectoryRecord,
    pub truth: PatientTruth,
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:05}")
}

/// Generate `config.n_patients` fully observed patients. Patient `p` draws
/// from its own derived stream, so output is independent of thread count.
pub fn generate_cohort(config: &CohortConfig) -> Result<Vec<SimulatedPatient>> {
    config.validate()?;
    Ok((0..config.n_patients)
        .into_par_iter()
        .map(|p| simulate_indexed(config, p))
        .collect())
}

/// Patient `index` of a cohort drawn with `config`.
pub fn simulate_indexed(config: &CohortConfig, index: usize) -> SimulatedPatient {
    let mut rng = seed::rng_for(config.seed, &[stream::COHORT, index as u64]);
    let label = if rng.random::<f64>() < config.prior_pmci { Label::Pmci } else { Label::Smci };
    let (record, truth) = simulate_patient(config, patient_id(index), label, &mut rng);
    SimulatedPatient { record, truth }
}

/// Missingness for the patient at `index`, from its own derived stream.
pub fn missingness_for(config: &CohortConfig, index: usize, record: &TrajectoryRecord) -> (TrajectoryRecord, Stratum) {
    let mut rng = seed::rng_for(config.seed, &[stream::COHORT, index as u64, 1]);
    apply_missingness(record, config, &mut rng)
}

// ---------------------------------------------------------------------------
// Serialization

pub use crate::io::{ArtifactHeader, SCHEMA_VERSION};

pub fn to_jsonl(records: &[TrajectoryRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records always serialize"));
        out.push('\n');
    }
    out
}

pub fn write_cohort(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    crate::io::write_atomic(path, to_jsonl(records).as_bytes())
}

pub fn write_cohort_with_header(records: &[TrajectoryRecord], header: &ArtifactHeader, path: &Path) -> Result<()> {
    let mut body = serde_json::to_string(header).expect("header serializes");
    body.push('\n');
    body.push_str(&to_jsonl(records));
    crate::io::write_atomic(path, body.as_bytes())
}

pub fn read_cohort(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    Ok(read_cohort_with_header(path)?.1)
}

pub fn read_cohort_with_header(path: &Path) -> Result<(Option<ArtifactHeader>, Vec<TrajectoryRecord>)> {
    crate::io::read_jsonl_validated(path, TrajectoryRecord::validate)
}

pub fn write_lines<W: Write>(mut w: W, records: &[TrajectoryRecord]) -> std::io::Result<()> {
    w.write_all(to_jsonl(records).as_bytes())
}

// ---------------------------------------------------------------------------
// Statistics

/// Linear-interpolated percentile (`p` in [0, 100]) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let (_, lo_v, rest) = v.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_v = *lo_v;
    if hi == lo {
        return lo_v;
    }
    let hi_v = rest.iter().cloned().fold(f64::INFINITY, f64::min);
    lo_v + (rank - lo as f64) * (hi_v - lo_v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortStats {
    pub latent_lo: Vec<f64>,
    pub latent_hi: Vec<f64>,
    pub latent_count: usize,
    pub biomarker_mean: Vec<Option<Vec<f64>>>,
    pub biomarker_std: Vec<Option<Vec<f64>>>,
    pub biomarker_count: Vec<usize>,
    /// Per position: (baseline biomarkers, biomarkers at τ) for every record
    /// observing both. Index 0 is empty.
    pub regression_pairs: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

/// Summary statistics over observed (not imputed) values. Latent ranges are
/// the `lo_pct`/`hi_pct` percentiles per dimension.
pub fn cohort_stats(records: &[TrajectoryRecord], lo_pct: f64, hi_pct: f64) -> Result<CohortStats> {
    if records.is_empty() {
        return Err(Error::Empty("cohort"));
    }
    let d = records[0].latent_dim();
    let observed = |r: &'_ TrajectoryRecord, p: usize| r.is_present(p) && r.flags[p] == Flag::Observed;
    let mut per_dim: Vec<Vec<f64>> = vec![Vec::new(); d];
    for r in records {
        for p in 0..GRID_LEN {
            if observed(r, p) {
                for (k, v) in r.latents[p].as_ref().unwrap().iter().enumerate() {
                    per_dim[k].push(*v);
                }
            }
        }
    }
    let latent_count = per_dim[0].len();
    let latent_lo = per_dim.iter().map(|v| percentile(v, lo_pct)).collect();
    let latent_hi = per_dim.iter().map(|v| percentile(v, hi_pct)).collect();

    let mut biomarker_mean = Vec::with_capacity(GRID_LEN);
    let mut biomarker_std = Vec::with_capacity(GRID_LEN);
    let mut biomarker_count = Vec::with_capacity(GRID_LEN);
    let mut regression_pairs = vec![Vec::new(); GRID_LEN];
    for p in 0..GRID_LEN {
        let ys: Vec<&Vec<f64>> = records
            .iter()
            .filter(|r| observed(r, p))
            .filter_map(|r| r.biomarkers[p].as_ref())
            .collect();
        biomarker_count.push(ys.len());
        if ys.is_empty() {
            biomarker_mean.push(None);
            biomarker_std.push(None);
        } else {
            let b = ys[0].len();
            let n = ys.len() as f64;
            let mean: Vec<f64> = (0..b).map(|k| ys.iter().map(|y| y[k]).sum::<f64>() / n).collect();
            let std = (0..b)
                .map(|k| (ys.iter().map(|y| (y[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt())
                .collect();
            biomarker_mean.push(Some(mean));
            biomarker_std.push(Some(std));
        }
        if p > 0 {
            for r in records {
                if let (Some(y0), Some(yt)) = (&r.biomarkers[0], &r.biomarkers[p]) {
                    if observed(r, p) {
                        regression_pairs[p].push((y0.clone(), yt.clone()));
                    }
                }
            }
        }
    }
    Ok(CohortStats {
        latent_lo,
        latent_hi,
        latent_count,
        biomarker_mean,
        biomarker_std,
        biomarker_count,
        regression_pairs,
    })
}
