//! End-to-end experiment stages shared by the CLI and the test suites.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classify::{compute_metrics, raw_features, train_classifier, FeatureMode, MetricsReport, MetricsRow};
use crate::cohort::{generate_cohort, missingness_for, simulate_indexed, CohortConfig, Flag, Label, TrajectoryRecord, GRID_LEN};
use crate::config::RunConfig;
use crate::curriculum::{run_curriculum, CurriculumState};
use crate::diffusion::{DenoiserParams, DenoiserShape, DiffusionModel, NamedTensor, NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::guidance::{
    biomarker_pairs, fit_quantizer, guided_sample_batch, latent_pairs, scorer_pairs, train_scorer, trajectory_mse,
    BiomarkerGuide, CandidateScorer, ExpectationModel, GeneratedTrajectory, LatentGuide, ScorerReport,
};
use crate::io::SCHEMA_VERSION;
use crate::seed::{self, stream};

#[derive(Debug, Clone)]
pub struct CohortSplits {
    /// With missingness applied.
    pub train: Vec<TrajectoryRecord>,
    /// Fully observed.
    pub val: Vec<TrajectoryRecord>,
    /// Fully observed, the ground truth for generated continuations.
    pub test: Vec<TrajectoryRecord>,
}

/// Sizes of the 70/10/20 split.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Cohort config actually simulated for a run: the root seed drives it.
pub fn cohort_config(config: &RunConfig) -> CohortConfig {
    CohortConfig {
        seed: config.seed,
        ..config.cohort.clone()
    }
}

/// Simulate the cohort and split it by patient.
pub fn build_splits(config: &RunConfig) -> Result<CohortSplits> {
    let cc = cohort_config(config);
    let patients = generate_cohort(&cc)?;
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.shuffle(&mut seed::rng_for(config.seed, &[stream::SPLIT]));
    let (n_train, n_val, _) = split_sizes(patients.len());
    let shifted = (config.domain_shift != 0.0).then(|| CohortConfig {
        atrophy_drift: cc.atrophy_drift * (1.0 + config.domain_shift),
        ..cc.clone()
    });
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n_val);
    let mut test = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        let rec = &patients[i].record;
        if rank < n_train {
            train.push(missingness_for(&cc, i, rec).0);
        } else if rank < n_train + n_val {
            val.push(rec.clone());
        } else {
            match &shifted {
                Some(s) => test.push(simulate_indexed(s, i).record),
                None => test.push(rec.clone()),
            }
        }
    }
    // stable order by patient id
    for v in [&mut train, &mut val, &mut test] {
        v.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    }
    Ok(CohortSplits { train, val, test })
}

/// Everything learned from the training split.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub diffusion: DiffusionModel,
    pub biomarker_guide: BiomarkerGuide,
    pub latent_guide: LatentGuide,
    pub scorer_report: ScorerReport,
}

/// Fit the quantizer, scorer and expectation models on observed training
/// scans.
pub fn fit_guides(config: &RunConfig, train: &[TrajectoryRecord]) -> Result<(BiomarkerGuide, LatentGuide, ScorerReport)> {
    let observed: Vec<&[f64]> = train
        .iter()
        .flat_map(|r| (0..GRID_LEN).filter(|&p| r.flags[p] == Flag::Observed).filter_map(|p| r.latent(p)))
        .collect();
    let quantizer = fit_quantizer(&observed, config.guidance.bins)?;
    let pairs = scorer_pairs(train, &quantizer)?;
    let (scorer, report) = train_scorer(&pairs, &quantizer, &config.guidance.scorer, config.seed)?;
    let basis = config.guidance.expectation;
    let expected = ExpectationModel::fit_with(&biomarker_pairs(train), basis)?;
    let latent = ExpectationModel::fit_with(&latent_pairs(train), basis)?;
    Ok((
        BiomarkerGuide {
            quantizer,
            scorer,
            expected,
        },
        LatentGuide { expected: latent },
        report,
    ))
}

/// Curriculum training of the denoiser plus the guidance models.
pub fn train_models(config: &RunConfig, train: &[TrajectoryRecord]) -> Result<(TrainedModels, CurriculumState)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let d = train[0].latent_dim();
    let mut model = DiffusionModel::new(&config.diffusion, d, &mut seed::rng_for(config.seed, &[stream::INIT]))?;
    let state = run_curriculum(
        &mut model,
        train,
        &config.curriculum,
        config.ablation.stages(),
        config.diffusion.batch_size,
        config.seed,
    )?;
    let (biomarker_guide, latent_guide, scorer_report) = fit_guides(config, train)?;
    Ok((
        TrainedModels {
            diffusion: model,
            biomarker_guide,
            latent_guide,
            scorer_report,
        },
        state,
    ))
}

impl TrainedModels {
    /// Scorer selected by the ablation switches, `None` when guidance is off.
    pub fn guide(&self, config: &RunConfig) -> Option<&dyn CandidateScorer> {
        if !config.ablation.guidance {
            None
        } else if config.ablation.feature_adaptation {
            Some(&self.biomarker_guide)
        } else {
            Some(&self.latent_guide)
        }
    }

    /// Candidate count implied by the config.
    pub fn candidates(&self, config: &RunConfig) -> usize {
        if config.ablation.guidance {
            config.guidance.candidates
        } else {
            1
        }
    }

    /// Generate positions 1..5 with `n` candidates per step (`n = 1` is
    /// unguided sampling).
    pub fn generate(&self, config: &RunConfig, records: &[TrajectoryRecord], n: usize) -> Result<Vec<GeneratedTrajectory>> {
        let guide = if n > 1 { self.guide(config).or(Some(&self.biomarker_guide)) } else { None };
        guided_sample_batch(&self.diffusion, guide, records, n, config.seed)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config_hash: String,
    pub shape: DenoiserShape,
    pub schedule: ScheduleParams,
    pub denoiser: Vec<NamedTensor>,
    pub biomarker_guide: BiomarkerGuide,
    pub latent_guide: LatentGuide,
    pub scorer_report: ScorerReport,
}

impl Checkpoint {
    pub fn from_models(m: &TrainedModels, config_hash: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.to_owned(),
            shape: m.diffusion.params.shape,
            schedule: m.diffusion.schedule.params(),
            denoiser: m.diffusion.params.to_named(),
            biomarker_guide: m.biomarker_guide.clone(),
            latent_guide: m.latent_guide.clone(),
            scorer_report: m.scorer_report.clone(),
        }
    }

    pub fn into_models(self, config: &RunConfig) -> Result<TrainedModels> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Invalid(format!("checkpoint schema_version {}", self.schema_version)));
        }
        let params = DenoiserParams::from_named(self.shape, &self.denoiser)?;
        let schedule = NoiseSchedule::from_params(self.schedule)?;
        let bg = &self.biomarker_guide;
        if bg.quantizer.dims() != self.shape.latent_dim || bg.scorer.vocab != bg.quantizer.vocab() {
            return Err(Error::shape("checkpoint", "guide does not match denoiser latent size"));
        }
        Ok(TrainedModels {
            diffusion: DiffusionModel::from_parts(params, schedule, config.diffusion.adam()),
            biomarker_guide: self.biomarker_guide,
            latent_guide: self.latent_guide,
            scorer_report: self.scorer_report,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("checkpoint: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Train a classifier on the training split and score the test split.
pub fn classify_split(
    config: &RunConfig,
    train: &[TrajectoryRecord],
    train_traj: Option<&[GeneratedTrajectory]>,
    test: &[TrajectoryRecord],
    test_traj: Option<&[GeneratedTrajectory]>,
    mode: FeatureMode,
) -> Result<MetricsReport> {
    let feats = |recs: &[TrajectoryRecord], traj: Option<&[GeneratedTrajectory]>| -> Result<Vec<Vec<f64>>> {
        if let Some(t) = traj {
            if t.len() != recs.len() {
                return Err(Error::Invalid(format!("{} trajectories for {} records", t.len(), recs.len())));
            }
        }
        recs.iter()
            .enumerate()
            .map(|(i, r)| raw_features(r, traj.map(|t| &t[i]), mode))
            .collect()
    };
    let x_train = feats(train, train_traj)?;
    let y_train: Vec<Label> = train.iter().map(|r| r.label).collect();
    let clf = train_classifier(&x_train, &y_train, mode, &config.classifier)?;
    let x_test = feats(test, test_traj)?;
    let probs = x_test.iter().map(|x| clf.predict_proba(x)).collect::<Result<Vec<_>>>()?;
    let y_test: Vec<Label> = test.iter().map(|r| r.label).collect();
    compute_metrics(&y_test, &probs, 0.5)
}

pub const MODE_BASELINE: &str = "baseline-only";
pub const MODE_FULL: &str = "full";
pub const MODE_UNGUIDED: &str = "unguided-full";

/// Generated trajectories for both splits at one candidate count.
#[derive(Debug, Clone)]
pub struct GeneratedSplits {
    pub n: usize,
    pub train: Vec<GeneratedTrajectory>,
    pub test: Vec<GeneratedTrajectory>,
}

pub fn generate_splits(config: &RunConfig, models: &TrainedModels, splits: &CohortSplits, n: usize) -> Result<GeneratedSplits> {
    Ok(GeneratedSplits {
        n,
        train: models.generate(config, &splits.train, n)?,
        test: models.generate(config, &splits.test, n)?,
    })
}

/// The three metrics rows: baseline-only, unguided, guided.
pub fn evaluate(
    config: &RunConfig,
    splits: &CohortSplits,
    unguided: &GeneratedSplits,
    guided: &GeneratedSplits,
    run_id: &str,
) -> Result<Vec<MetricsRow>> {
    let hash = config.hash();
    let base = classify_split(config, &splits.train, None, &splits.test, None, FeatureMode::BaselineOnly)?;
    let ung = classify_split(config, &splits.train, Some(&unguided.train), &splits.test, Some(&unguided.test), FeatureMode::Full)?;
    let gui = classify_split(config, &splits.train, Some(&guided.train), &splits.test, Some(&guided.test), FeatureMode::Full)?;
    Ok(vec![
        MetricsRow::new(run_id, MODE_BASELINE, &base, config.seed, &hash),
        MetricsRow::new(run_id, MODE_UNGUIDED, &ung, config.seed, &hash),
        MetricsRow::new(run_id, MODE_FULL, &gui, config.seed, &hash),
    ])
}

/// Per-patient mean squared error of generated test trajectories.
pub fn test_errors(splits: &CohortSplits, traj: &[GeneratedTrajectory]) -> Result<Vec<f64>> {
    splits.test.iter().zip(traj).map(|(r, t)| trajectory_mse(r, t)).collect()
}

/// Full run: split, train, sample (unguided and as configured), evaluate.
pub fn run_pipeline(config: &RunConfig, run_id: &str) -> Result<Vec<MetricsRow>> {
    let splits = build_splits(config)?;
    let (models, _) = train_models(config, &splits.train)?;
    let unguided = generate_splits(config, &models, &splits, 1)?;
    let n = models.candidates(config);
    let guided = if n == 1 { unguided.clone() } else { generate_splits(config, &models, &splits, n)? };
    evaluate(config, &splits, &unguided, &guided, run_id)
}

/// One trained model, several candidate counts.
#[derive(Debug, Clone)]
pub struct CandidateStudy {
    pub baseline: MetricsReport,
    /// `(n, per-patient test error, metrics of the full classifier)`.
    pub per_n: Vec<(usize, Vec<f64>, MetricsReport)>,
}

pub fn candidate_study(config: &RunConfig, ns: &[usize]) -> Result<CandidateStudy> {
    let splits = build_splits(config)?;
    let (models, _) = train_models(config, &splits.train)?;
    let baseline = classify_split(config, &splits.train, None, &splits.test, None, FeatureMode::BaselineOnly)?;
    let mut per_n = Vec::with_capacity(ns.len());
    for &n in ns {
        let g = generate_splits(config, &models, &splits, n)?;
        let errs = test_errors(&splits, &g.test)?;
        let m = classify_split(config, &splits.train, Some(&g.train), &splits.test, Some(&g.test), FeatureMode::Full)?;
        log::info!(
            "seed {} N={n}: test mse {:.4}, auc {:?}, acc {:.3}",
            config.seed,
            errs.iter().sum::<f64>() / errs.len() as f64,
            m.auc,
            m.acc
        );
        per_n.push((n, errs, m));
    }
    Ok(CandidateStudy { baseline, per_n })
}

// ---------------------------------------------------------------------------
// Sweeps and ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Steps,
    MaxDifficulty,
    Candidates,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T_steps" | "steps" => Ok(Self::Steps),
            "D_max" | "max_difficulty" => Ok(Self::MaxDifficulty),
            "N" | "candidates" => Ok(Self::Candidates),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?} (T_steps, D_max, N)"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Steps => "T_steps",
            Self::MaxDifficulty => "D_max",
            Self::Candidates => "N",
        }
    }

    pub fn apply(self, config: &RunConfig, value: usize) -> Result<RunConfig> {
        let mut c = config.clone();
        match self {
            Self::Steps => c.diffusion.steps = value,
            Self::MaxDifficulty => c.curriculum.max_difficulty = value,
            Self::Candidates => c.guidance.candidates = value,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: usize,
    pub acc: f64,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub auc: Option<f64>,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
    pub schema_version: u32,
}

fn sweep_row(axis: SweepAxis, value: usize, m: &MetricsReport, config: &RunConfig) -> SweepRow {
    SweepRow {
        axis: axis.name().into(),
        value,
        acc: m.acc,
        sen: m.sen,
        spe: m.spe,
        auc: m.auc,
        n: m.n,
        seed: config.seed,
        config_hash: config.hash(),
        schema_version: SCHEMA_VERSION,
    }
}

/// Guided-pipeline metrics per swept value. Candidate sweeps share one trained
/// model since training does not depend on N.
pub fn sweep(config: &RunConfig, axis: SweepAxis, values: &[usize]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    if axis == SweepAxis::Candidates {
        for &v in values {
            axis.apply(config, v)?;
        }
        let study = candidate_study(config, values)?;
        for (n, _, m) in &study.per_n {
            rows.push(sweep_row(axis, *n, m, &axis.apply(config, *n)?));
        }
        return Ok(rows);
    }
    for &v in values {
        let c = axis.apply(config, v)?;
        let splits = build_splits(&c)?;
        let (models, _) = train_models(&c, &splits.train)?;
        let g = generate_splits(&c, &models, &splits, models.candidates(&c))?;
        let m = classify_split(&c, &splits.train, Some(&g.train), &splits.test, Some(&g.test), FeatureMode::Full)?;
        rows.push(sweep_row(axis, v, &m, &c));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub reference: bool,
    pub acc: f64,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub auc: Option<f64>,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
    pub schema_version: u32,
}

/// The six single-component removals followed by the full model.
pub fn ablation_settings(config: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let with = |f: fn(&mut RunConfig)| {
        let mut c = config.clone();
        f(&mut c);
        c
    };
    vec![
        ("w/o interpolation task", with(|c| c.ablation.interpolation_task = false)),
        ("w/o interpolation aug", with(|c| c.ablation.interpolation_aug = false)),
        ("w/o extrapolation task", with(|c| c.ablation.extrapolation_task = false)),
        ("w/o extrapolation aug", with(|c| c.ablation.extrapolation_aug = false)),
        ("w/o feature adaptation", with(|c| c.ablation.feature_adaptation = false)),
        ("w/o guidance", with(|c| c.ablation.guidance = false)),
        ("full", config.clone()),
    ]
}

pub fn ablate(config: &RunConfig) -> Result<Vec<AblationRow>> {
    let splits = build_splits(config)?;
    let mut rows = Vec::new();
    // Settings that differ only at sampling time reuse the full model.
    let (full_models, _) = train_models(config, &splits.train)?;
    for (name, c) in ablation_settings(config) {
        let retrain = c.ablation.stages() != config.ablation.stages();
        let trained;
        let models = if retrain {
            trained = train_models(&c, &splits.train)?.0;
            &trained
        } else {
            &full_models
        };
        let g = generate_splits(&c, models, &splits, models.candidates(&c))?;
        let m = classify_split(&c, &splits.train, Some(&g.train), &splits.test, Some(&g.test), FeatureMode::Full)?;
        log::info!("ablation {name}: auc {:?}", m.auc);
        rows.push(AblationRow {
            setting: name.into(),
            reference: name == "full",
            acc: m.acc,
            sen: m.sen,
            spe: m.spe,
            auc: m.auc,
            n: m.n,
            seed: c.seed,
            config_hash: c.hash(),
            schema_version: SCHEMA_VERSION,
        });
    }
    Ok(rows)
}

pub fn rows_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
}
