//! Guided autoregressive trajectory generation.
//!
//! At each future position the diffusion model proposes `N` candidates. Each
//! candidate is tokenized, mapped to predicted biomarkers by a small learned
//! scorer, and compared against the biomarkers expected from the patient's
//! baseline. The most plausible candidate is kept and conditions the next step.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{percentile, Flag, Label, TrajectoryRecord, GRID_LEN};
use crate::diffusion::{ConditionSequence, DiffusionModel, TaskMode};
use crate::error::{Error, Result};
use crate::io::ArtifactHeader;
use crate::numkernel::{ones_column, randn, Adam, AdamConfig, Tape, Tensor};
use crate::seed::{self, stream};

// ---------------------------------------------------------------------------
// Quantization

/// Uniform per-dimension bins over a clipped range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub bins: usize,
}

/// Token ids for one latent: `dim * bins + bin`.
pub type TokenSequence = Vec<usize>;

impl QuantizerSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!("quantizer needs at least 2 bins, got {bins}")));
        }
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::shape("quantizer", format!("{} lower vs {} upper bounds", lower.len(), upper.len())));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::Invalid("quantizer bounds must be finite with lower < upper".into()));
        }
        Ok(Self { lower, upper, bins })
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn vocab(&self) -> usize {
        self.dims() * self.bins
    }

    pub fn bin_width(&self, dim: usize) -> f64 {
        (self.upper[dim] - self.lower[dim]) / self.bins as f64
    }

    fn bin(&self, dim: usize, x: f64) -> usize {
        let b = ((x - self.lower[dim]) / self.bin_width(dim)).floor();
        b.clamp(0.0, (self.bins - 1) as f64) as usize
    }

    pub fn quantize(&self, z: &[f64]) -> Result<TokenSequence> {
        if z.len() != self.dims() {
            return Err(Error::shape("quantize", format!("latent has {} dims, quantizer {}", z.len(), self.dims())));
        }
        Ok(z.iter().enumerate().map(|(k, &x)| k * self.bins + self.bin(k, x)).collect())
    }

    /// Bin centers for a token sequence.
    pub fn dequantize(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.len() != self.dims() {
            return Err(Error::shape("dequantize", format!("{} tokens for {} dims", tokens.len(), self.dims())));
        }
        tokens
            .iter()
            .enumerate()
            .map(|(k, &tok)| {
                if tok / self.bins != k || tok >= self.vocab() {
                    return Err(Error::OutOfRange(format!("token {tok} at dim {k}")));
                }
                let b = tok % self.bins;
                Ok(self.lower[k] + (b as f64 + 0.5) * self.bin_width(k))
            })
            .collect()
    }
}

/// Bounds at the 0.5th/99.5th percentiles of each dimension.
pub fn fit_quantizer(latents: &[&[f64]], bins: usize) -> Result<QuantizerSpec> {
    if latents.is_empty() {
        return Err(Error::Empty("quantizer training latents"));
    }
    let d = latents[0].len();
    let mut lower = Vec::with_capacity(d);
    let mut upper = Vec::with_capacity(d);
    for k in 0..d {
        let col: Vec<f64> = latents.iter().map(|z| z[k]).collect();
        let (mut lo, mut hi) = (percentile(&col, 0.5), percentile(&col, 99.5));
        if lo >= hi {
            let margin = lo.abs().max(1.0) * f64::EPSILON * bins as f64;
            log::warn!("quantizer: dimension {k} is degenerate at {lo}; widening by {margin:e}");
            let c = lo;
            lo = c - margin;
            hi = c + margin;
        }
        lower.push(lo);
        upper.push(hi);
    }
    QuantizerSpec::new(lower, upper, bins)
}

// ---------------------------------------------------------------------------
// Scorer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of pairs held out for the R² report.
    pub holdout: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            epochs: 30,
            batch_size: 64,
            lr: 1e-2,
            holdout: 0.1,
        }
    }
}

/// Token embedding table, mean pooling, linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub dims: usize,
    pub vocab: usize,
    pub embed: Tensor,
    pub head: Tensor,
    pub bias: Tensor,
}

/// Maps a token sequence to predicted biomarkers.
pub trait BiomarkerPredictor: Sync {
    fn predict(&self, tokens: &[TokenSequence]) -> Result<Vec<Vec<f64>>>;
}

impl ScorerParams {
    pub fn init(dims: usize, vocab: usize, embed_dim: usize, out_dim: usize, rng: &mut seed::Rng) -> Self {
        Self {
            dims,
            vocab,
            embed: randn(vocab, embed_dim, 1.0, rng),
            head: randn(embed_dim, out_dim, 1.0 / (embed_dim as f64).sqrt(), rng),
            bias: Tensor::zeros(&[1, out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.head.cols()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.embed, &self.head, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.embed, &mut self.head, &mut self.bias]
    }

    /// Mean-pooling operator as a `rows×vocab` matrix with `1/dims` at each token.
    fn pooling(&self, tokens: &[TokenSequence]) -> Result<Tensor> {
        let mut data = vec![0.0; tokens.len() * self.vocab];
        let w = 1.0 / self.dims as f64;
        for (r, seq) in tokens.iter().enumerate() {
            if seq.len() != self.dims {
                return Err(Error::shape("scorer", format!("{} tokens, expected {}", seq.len(), self.dims)));
            }
            for &t in seq {
                if t >= self.vocab {
                    return Err(Error::OutOfRange(format!("token {t} >= vocab {}", self.vocab)));
                }
                data[r * self.vocab + t] += w;
            }
        }
        Tensor::matrix(tokens.len(), self.vocab, data)
    }
}

impl BiomarkerPredictor for ScorerParams {
    fn predict(&self, tokens: &[TokenSequence]) -> Result<Vec<Vec<f64>>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let pool = tape.constant(self.pooling(tokens)?);
        let ones = tape.constant(ones_column(tokens.len()));
        let (e, h, b) = (tape.param(&self.embed), tape.param(&self.head), tape.param(&self.bias));
        let pooled = tape.matmul(pool, e)?;
        let lin = tape.matmul(pooled, h)?;
        let bias = tape.matmul(ones, b)?;
        let out = tape.add(lin, bias)?;
        let v = tape.value(out);
        Ok((0..v.rows()).map(|r| v.row(r).to_vec()).collect())
    }
}

/// Mean squared error of the scorer on a batch, with parameter gradients in
/// `tensors()` order.
pub fn scorer_loss(params: &ScorerParams, tokens: &[TokenSequence], targets: &[Vec<f64>]) -> Result<(f64, Vec<Tensor>)> {
    if tokens.is_empty() || tokens.len() != targets.len() {
        return Err(Error::shape("scorer_loss", format!("{} inputs, {} targets", tokens.len(), targets.len())));
    }
    let mut tape = Tape::new();
    let pool = tape.constant(params.pooling(tokens)?);
    let ones = tape.constant(ones_column(tokens.len()));
    let y = tape.constant(Tensor::from_rows(targets)?);
    let (e, h, b) = (tape.param(&params.embed), tape.param(&params.head), tape.param(&params.bias));
    let pooled = tape.matmul(pool, e)?;
    let lin = tape.matmul(pooled, h)?;
    let bias = tape.matmul(ones, b)?;
    let out = tape.add(lin, bias)?;
    let loss = tape.mse(out, y)?;
    let g = tape.backward(loss)?;
    let grads = [(e, &params.embed), (h, &params.head), (b, &params.bias)]
        .into_iter()
        .map(|(v, t)| g.get_or_zeros(v, t))
        .collect();
    Ok((tape.value(loss).data()[0], grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerReport {
    pub final_loss: f64,
    /// Held-out R² per biomarker component; empty when nothing was held out.
    pub heldout_r2: Vec<f64>,
}

impl ScorerReport {
    pub fn mean_r2(&self) -> f64 {
        self.heldout_r2.iter().sum::<f64>() / self.heldout_r2.len().max(1) as f64
    }
}

fn r_squared(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Vec<f64> {
    let b = truth[0].len();
    let n = truth.len() as f64;
    (0..b)
        .map(|k| {
            let mean = truth.iter().map(|y| y[k]).sum::<f64>() / n;
            let ss_tot: f64 = truth.iter().map(|y| (y[k] - mean).powi(2)).sum();
            let ss_res: f64 = truth.iter().zip(pred).map(|(y, p)| (y[k] - p[k]).powi(2)).sum();
            if ss_tot > 0.0 {
                1.0 - ss_res / ss_tot
            } else if ss_res == 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Fit the scorer by Adam on MSE; all randomness comes from `seed`.
pub fn train_scorer(
    pairs: &[(TokenSequence, Vec<f64>)],
    quantizer: &QuantizerSpec,
    config: &ScorerConfig,
    seed: u64,
) -> Result<(ScorerParams, ScorerReport)> {
    if pairs.is_empty() {
        return Err(Error::Empty("scorer training pairs"));
    }
    let out_dim = pairs[0].1.len();
    let mut rng = seed::rng_for(seed, &[stream::SCORER]);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((pairs.len() as f64 * config.holdout).round() as usize).min(pairs.len() - 1);
    let (held, train) = order.split_at(n_hold);
    let mut train = train.to_vec();

    let mut params = ScorerParams::init(quantizer.dims(), quantizer.vocab(), config.embed_dim, out_dim, &mut rng);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &params.tensors(),
    );
    let mut last = f64::NAN;
    for _ in 0..config.epochs {
        train.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0);
        for chunk in train.chunks(config.batch_size.max(1)) {
            let toks: Vec<TokenSequence> = chunk.iter().map(|&i| pairs[i].0.clone()).collect();
            let ys: Vec<Vec<f64>> = chunk.iter().map(|&i| pairs[i].1.clone()).collect();
            let (loss, grads) = scorer_loss(&params, &toks, &ys)?;
            adam.step(&mut params.tensors_mut(), &grads)?;
            total += loss;
            count += 1;
        }
        last = total / count as f64;
    }
    let heldout_r2 = if held.is_empty() {
        Vec::new()
    } else {
        let toks: Vec<TokenSequence> = held.iter().map(|&i| pairs[i].0.clone()).collect();
        let ys: Vec<Vec<f64>> = held.iter().map(|&i| pairs[i].1.clone()).collect();
        r_squared(&params.predict(&toks)?, &ys)
    };
    let report = ScorerReport {
        final_loss: last,
        heldout_r2,
    };
    log::info!("scorer: loss {:.4}, held-out mean R² {:.3}", report.final_loss, report.mean_r2());
    Ok((params, report))
}

/// (tokens, biomarkers) for every observed scan.
pub fn scorer_pairs(records: &[TrajectoryRecord], quantizer: &QuantizerSpec) -> Result<Vec<(TokenSequence, Vec<f64>)>> {
    let mut out = Vec::new();
    for r in records {
        for p in 0..GRID_LEN {
            if r.flags[p] != Flag::Observed {
                continue;
            }
            if let (Some(z), Some(y)) = (r.latent(p), &r.biomarkers[p]) {
                out.push((quantizer.quantize(z)?, y.clone()));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Expected values

/// Regressors built from the baseline vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// `x` itself.
    #[default]
    Affine,
    /// `x` followed by every product `x_i·x_j`, `i <= j`.
    Quadratic,
}

impl Basis {
    pub fn expand(self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        if self == Basis::Quadratic {
            for i in 0..x.len() {
                for j in i..x.len() {
                    out.push(x[i] * x[j]);
                }
            }
        }
        out
    }
}

/// Per future position, a least-squares map from (a basis expansion of) a
/// baseline vector to the expected vector at that position, with
/// per-component residual std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationModel {
    #[serde(default)]
    pub basis: Basis,
    /// Index τ-1: `(regressors+1) × out` coefficients, intercept in row 0.
    pub coef: Vec<Vec<Vec<f64>>>,
    pub sigma: Vec<Vec<f64>>,
}

pub const SIGMA_FLOOR: f64 = 1e-6;

impl ExpectationModel {
    /// Affine fit. `pairs[τ]` holds `(x_0, y_τ)` for τ in 1..=5; index 0 is
    /// ignored.
    pub fn fit(pairs: &[Vec<(Vec<f64>, Vec<f64>)>]) -> Result<Self> {
        Self::fit_with(pairs, Basis::Affine)
    }

    pub fn fit_with(pairs: &[Vec<(Vec<f64>, Vec<f64>)>], basis: Basis) -> Result<Self> {
        if pairs.len() != GRID_LEN {
            return Err(Error::shape("expected model", format!("{} positions", pairs.len())));
        }
        let mut coef = Vec::with_capacity(GRID_LEN - 1);
        let mut sigma = Vec::with_capacity(GRID_LEN - 1);
        for (tau, ps) in pairs.iter().enumerate().skip(1) {
            if ps.is_empty() {
                return Err(Error::Empty("expected-model pairs"));
            }
            let ps: Vec<(Vec<f64>, &Vec<f64>)> = ps.iter().map(|(x, y)| (basis.expand(x), y)).collect();
            let (p_in, p_out) = (ps[0].0.len(), ps[0].1.len());
            let n = ps.len();
            let y = DMatrix::from_fn(n, p_out, |i, k| ps[i].1[k]);
            let (c, resid) = if n < p_out + 2 || n < p_in + 2 {
                log::warn!("expected model: {n} pairs at position {tau}; using population mean");
                let mean: DVector<f64> = DVector::from_fn(p_out, |k, _| y.column(k).mean());
                let mut c = DMatrix::zeros(p_in + 1, p_out);
                c.row_mut(0).copy_from(&mean.transpose());
                let resid = DMatrix::from_fn(n, p_out, |i, k| y[(i, k)] - mean[k]);
                (c, resid)
            } else {
                let x = DMatrix::from_fn(n, p_in + 1, |i, j| if j == 0 { 1.0 } else { ps[i].0[j - 1] });
                let c = x
                    .clone()
                    .svd(true, true)
                    .solve(&y, 1e-12)
                    .map_err(|e| Error::Invalid(format!("least squares at position {tau}: {e}")))?;
                let resid = &y - &x * &c;
                (c, resid)
            };
            let s: Vec<f64> = (0..p_out)
                .map(|k| (resid.column(k).norm_squared() / n as f64).sqrt().max(SIGMA_FLOOR))
                .collect();
            coef.push((0..c.nrows()).map(|i| c.row(i).iter().copied().collect()).collect());
            sigma.push(s);
        }
        let m = Self { basis, coef, sigma };
        if m.sigma.iter().flatten().any(|v| !v.is_finite()) || m.coef.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("expected model fit".into()));
        }
        Ok(m)
    }

    /// (μ_τ, σ_τ) for baseline `x`.
    pub fn expected(&self, tau: usize, x: &[f64]) -> Result<(Vec<f64>, &[f64])> {
        if tau == 0 || tau >= GRID_LEN {
            return Err(Error::OutOfRange(format!("position {tau}")));
        }
        let c = &self.coef[tau - 1];
        let x = self.basis.expand(x);
        if x.len() + 1 != c.len() {
            return Err(Error::shape("expected", format!("{} regressors vs model {}", x.len(), c.len() - 1)));
        }
        let mu = (0..c[0].len())
            .map(|k| c[0][k] + x.iter().zip(&c[1..]).map(|(xi, row)| xi * row[k]).sum::<f64>())
            .collect();
        Ok((mu, &self.sigma[tau - 1]))
    }
}

/// Baseline-to-τ biomarker pairs over observed scans.
pub fn biomarker_pairs(records: &[TrajectoryRecord]) -> Vec<Vec<(Vec<f64>, Vec<f64>)>> {
    paired(records, |r, p| r.biomarkers[p].clone())
}

/// Baseline-to-τ latent pairs over observed scans.
pub fn latent_pairs(records: &[TrajectoryRecord]) -> Vec<Vec<(Vec<f64>, Vec<f64>)>> {
    paired(records, |r, p| r.latents[p].clone())
}

fn paired(
    records: &[TrajectoryRecord],
    get: impl Fn(&TrajectoryRecord, usize) -> Option<Vec<f64>>,
) -> Vec<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut out = vec![Vec::new(); GRID_LEN];
    for r in records {
        let Some(x0) = get(r, 0) else { continue };
        for (p, slot) in out.iter_mut().enumerate().skip(1) {
            if r.flags[p] == Flag::Observed {
                if let Some(y) = get(r, p) {
                    slot.push((x0.clone(), y));
                }
            }
        }
    }
    out
}

/// Negative standardized squared distance; 0 is the maximum.
pub fn plausibility_score(y: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if y.len() != mu.len() || y.len() != sigma.len() {
        return Err(Error::shape("plausibility", format!("{} / {} / {}", y.len(), mu.len(), sigma.len())));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Invalid("plausibility: sigma must be positive".into()));
    }
    Ok(-y.iter().zip(mu).zip(sigma).map(|((y, m), s)| ((y - m) / s).powi(2)).sum::<f64>())
}

// ---------------------------------------------------------------------------
// Candidate scoring

/// Scores `N` candidate latents at position `tau` for a patient.
pub trait CandidateScorer: Sync {
    fn score(&self, tau: usize, record: &TrajectoryRecord, candidates: &[Vec<f64>]) -> Result<Vec<f64>>;
}

/// Tokenize → predict biomarkers → compare with baseline-conditioned expectation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerGuide {
    pub quantizer: QuantizerSpec,
    pub scorer: ScorerParams,
    pub expected: ExpectationModel,
}

impl CandidateScorer for BiomarkerGuide {
    fn score(&self, tau: usize, record: &TrajectoryRecord, candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
        let y0 = record.biomarkers[0]
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("{}: baseline biomarkers missing", record.patient_id)))?;
        let (mu, sigma) = self.expected.expected(tau, y0)?;
        let tokens = candidates.iter().map(|z| self.quantizer.quantize(z)).collect::<Result<Vec<_>>>()?;
        let preds = self.scorer.predict(&tokens)?;
        preds.iter().map(|y| plausibility_score(y, &mu, sigma)).collect()
    }
}

/// Compare raw latents with a baseline-latent expectation, skipping the
/// quantize/scorer path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGuide {
    pub expected: ExpectationModel,
}

impl CandidateScorer for LatentGuide {
    fn score(&self, tau: usize, record: &TrajectoryRecord, candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (mu, sigma) = self.expected.expected(tau, record.baseline())?;
        candidates.iter().map(|z| plausibility_score(z, &mu, sigma)).collect()
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn select_best(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Empty("candidate scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("candidate score".into()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Sampling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStep {
    pub position: usize,
    pub selected: usize,
    pub latent: Vec<f64>,
    pub scores: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// Generated positions 1..5 for one patient with everything needed to replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTrajectory {
    pub patient_id: String,
    pub label: Label,
    pub steps: Vec<GenerationStep>,
}

impl GeneratedTrajectory {
    /// Generated latents at positions 1..5, in order.
    pub fn latents(&self) -> Vec<&[f64]> {
        self.steps.iter().map(|s| s.latent.as_slice()).collect()
    }
}

/// Seed for candidate `n` of patient `id` at position `tau`.
pub fn candidate_seed(run_seed: u64, id: &str, tau: usize, n: usize) -> u64 {
    seed::derive(run_seed, &[stream::SAMPLE, seed::key_of(id), tau as u64, n as u64])
}

/// Record holding only the baseline, with later positions absent.
pub fn baseline_only(record: &TrajectoryRecord) -> TrajectoryRecord {
    let mut r = record.clone();
    for p in 1..GRID_LEN {
        r.latents[p] = None;
        r.biomarkers[p] = None;
        r.mask[p] = 0;
        r.flags[p] = Flag::Observed;
    }
    r
}

/// Generate positions 1..5 for each record from its baseline, keeping the
/// best of `n_candidates` at each step. `scorer = None` means no scoring
/// (only valid with one candidate).
pub fn guided_sample_batch(
    model: &DiffusionModel,
    scorer: Option<&dyn CandidateScorer>,
    records: &[TrajectoryRecord],
    n_candidates: usize,
    run_seed: u64,
) -> Result<Vec<GeneratedTrajectory>> {
    if n_candidates == 0 {
        return Err(Error::Config("candidate count must be >= 1".into()));
    }
    if scorer.is_none() && n_candidates > 1 {
        return Err(Error::Config("several candidates need a scorer".into()));
    }
    // Rows are independent, so chunking only affects speed.
    let chunk = (256 / n_candidates).max(1);
    let out: Vec<Vec<GeneratedTrajectory>> = records
        .par_chunks(chunk)
        .map(|recs| sample_chunk(model, scorer, recs, n_candidates, run_seed))
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

fn sample_chunk(
    model: &DiffusionModel,
    scorer: Option<&dyn CandidateScorer>,
    records: &[TrajectoryRecord],
    n: usize,
    run_seed: u64,
) -> Result<Vec<GeneratedTrajectory>> {
    let mut work: Vec<TrajectoryRecord> = records.iter().map(baseline_only).collect();
    let mut traj: Vec<GeneratedTrajectory> = records
        .iter()
        .map(|r| GeneratedTrajectory {
            patient_id: r.patient_id.clone(),
            label: r.label,
            steps: Vec::with_capacity(GRID_LEN - 1),
        })
        .collect();
    for tau in 1..GRID_LEN {
        let mut conds = Vec::with_capacity(records.len() * n);
        let mut rngs = Vec::with_capacity(records.len() * n);
        let mut seeds = Vec::with_capacity(records.len());
        for w in &work {
            let cond = ConditionSequence::build(w, tau, TaskMode::Extrapolation)?;
            let s: Vec<u64> = (0..n).map(|k| candidate_seed(run_seed, &w.patient_id, tau, k)).collect();
            for &sd in &s {
                conds.push(cond.clone());
                rngs.push(seed::rng(sd));
            }
            seeds.push(s);
        }
        let cands = model.sample_batch(&conds, &mut rngs)?;
        for (i, (w, s)) in work.iter_mut().zip(seeds).enumerate() {
            let mine = &cands[i * n..(i + 1) * n];
            // A lone candidate is kept unscored, so N = 1 is the unguided sampler.
            let scores = match scorer {
                Some(sc) if n > 1 => sc.score(tau, w, mine)?,
                _ => vec![0.0],
            };
            let best = select_best(&scores)?;
            w.set_imputed(tau, mine[best].clone());
            traj[i].steps.push(GenerationStep {
                position: tau,
                selected: best,
                latent: mine[best].clone(),
                scores,
                seeds: s,
            });
        }
    }
    Ok(traj)
}

/// Single-patient form of [`guided_sample_batch`].
pub fn guided_autoregressive_sample(
    model: &DiffusionModel,
    scorer: Option<&dyn CandidateScorer>,
    record: &TrajectoryRecord,
    n_candidates: usize,
    run_seed: u64,
) -> Result<GeneratedTrajectory> {
    let mut v = guided_sample_batch(model, scorer, std::slice::from_ref(record), n_candidates, run_seed)?;
    Ok(v.pop().expect("one trajectory"))
}

/// Re-derive each selected latent from its recorded seed and the previously
/// selected history; returns false on the first mismatch.
pub fn replay_matches(model: &DiffusionModel, record: &TrajectoryRecord, traj: &GeneratedTrajectory) -> Result<bool> {
    let mut work = baseline_only(record);
    for step in &traj.steps {
        let cond = ConditionSequence::build(&work, step.position, TaskMode::Extrapolation)?;
        let seed = *step
            .seeds
            .get(step.selected)
            .ok_or_else(|| Error::Invalid(format!("{}: selected index out of range", traj.patient_id)))?;
        let z = model.sample(&cond, &mut seed::rng(seed))?;
        if z != step.latent {
            return Ok(false);
        }
        work.set_imputed(step.position, z);
    }
    Ok(true)
}

/// Mean squared error of generated positions 1..5 against the ground truth.
pub fn trajectory_mse(truth: &TrajectoryRecord, traj: &GeneratedTrajectory) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for step in &traj.steps {
        let z = truth
            .latent(step.position)
            .ok_or_else(|| Error::Invalid(format!("{}: no ground truth at {}", truth.patient_id, step.position)))?;
        total += z.iter().zip(&step.latent).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        n += z.len();
    }
    if n == 0 {
        return Err(Error::Empty("trajectory"));
    }
    Ok(total / n as f64)
}

pub fn write_trajectories(path: &std::path::Path, header: Option<&ArtifactHeader>, trajs: &[GeneratedTrajectory]) -> Result<()> {
    crate::io::write_jsonl(path, header, trajs)
}

pub fn read_trajectories(path: &std::path::Path) -> Result<(Option<ArtifactHeader>, Vec<GeneratedTrajectory>)> {
    crate::io::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_split() {
        let q = QuantizerSpec::new(vec![0.0], vec![1.0], 2).unwrap();
        assert_eq!(q.quantize(&[0.25]).unwrap(), vec![0]);
        assert_eq!(q.quantize(&[0.75]).unwrap(), vec![1]);
        assert_eq!(q.quantize(&[-100.0]).unwrap(), vec![0]);
        assert_eq!(q.quantize(&[100.0]).unwrap(), vec![1]);
        assert_eq!(q.dequantize(&[1]).unwrap(), vec![0.75]);
        assert!(q.dequantize(&[2]).is_err());
        assert!(QuantizerSpec::new(vec![0.0], vec![1.0], 1).is_err());
    }

    #[test]
    fn quadratic_basis_recovers_products() {
        use rand::Rng;
        // y = 1 + x0 - 2·x0·x1 + 0.5·x1², no noise
        let f = |x: &[f64]| vec![1.0 + x[0] - 2.0 * x[0] * x[1] + 0.5 * x[1] * x[1]];
        let mut rng = seed::rng_for(11, &[0]);
        let xs: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let mut pairs = vec![Vec::new(); GRID_LEN];
        for p in pairs.iter_mut().skip(1) {
            *p = xs.iter().map(|x| (x.clone(), f(x))).collect();
        }
        let m = ExpectationModel::fit_with(&pairs, Basis::Quadratic).unwrap();
        let (mu, sigma) = m.expected(3, &[0.7, -1.3]).unwrap();
        assert!((mu[0] - f(&[0.7, -1.3])[0]).abs() < 1e-9);
        assert_eq!(sigma[0], SIGMA_FLOOR);
        let affine = ExpectationModel::fit(&pairs).unwrap();
        assert!(affine.sigma[0][0] > 0.1);
        assert_eq!(Basis::Quadratic.expand(&[2.0, 3.0]), vec![2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn token_ids_offset_by_dimension() {
        let q = QuantizerSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], 4).unwrap();
        assert_eq!(q.quantize(&[0.1, 0.9]).unwrap(), vec![0, 7]);
        // a dim-0 token in the dim-1 slot is rejected
        assert!(q.dequantize(&[0, 3]).is_err());
    }

    #[test]
    fn degenerate_dimension_widened_to_middle_bin() {
        for c in [0.0, 3.7, -1234.5] {
            let data: Vec<Vec<f64>> = (0..50).map(|i| vec![c, i as f64]).collect();
            let refs: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
            let q = fit_quantizer(&refs, 64).unwrap();
            assert!(q.lower[0] < q.upper[0]);
            for z in &data {
                assert_eq!(q.quantize(z).unwrap()[0], 32, "constant {c}");
            }
        }
    }

    #[test]
    fn outside_fraction_near_one_percent() {
        let mut rng = seed::rng(4);
        let data: Vec<Vec<f64>> = (0..20_000).map(|_| vec![rand::Rng::random::<f64>(&mut rng)]).collect();
        let refs: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let q = fit_quantizer(&refs, 64).unwrap();
        let mut rng = seed::rng(5);
        let n = 20_000;
        let out = (0..n)
            .filter(|_| {
                let x: f64 = rand::Rng::random(&mut rng);
                x < q.lower[0] || x > q.upper[0]
            })
            .count();
        let p = 0.01;
        let band = 4.0 * (n as f64 * p * (1.0 - p)).sqrt();
        assert!((out as f64 - n as f64 * p).abs() < band, "{out}");
    }

    #[test]
    fn plausibility_algebra() {
        assert_eq!(plausibility_score(&[1.0, 2.0], &[1.0, 2.0], &[0.5, 3.0]).unwrap(), 0.0);
        let a = plausibility_score(&[1.0, -2.0], &[0.3, 0.1], &[0.5, 3.0]).unwrap();
        let b = plausibility_score(&[1.0, -2.0], &[0.3, 0.1], &[1.0, 6.0]).unwrap();
        assert!((b - a / 4.0).abs() < 1e-15);
        assert!(plausibility_score(&[1.0], &[1.0], &[0.0]).is_err());
        assert!(plausibility_score(&[1.0], &[1.0], &[-1.0]).is_err());
        assert!(plausibility_score(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn select_ties_go_low() {
        assert_eq!(select_best(&[1.0, 3.0, 3.0, 2.0]).unwrap(), 1);
        assert_eq!(select_best(&[5.0]).unwrap(), 0);
        assert!(select_best(&[]).is_err());
        assert!(select_best(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn expectation_noiseless_and_fallback() {
        // y = 2 + 3x exactly at every position
        let mut pairs = vec![Vec::new(); GRID_LEN];
        for slot in pairs.iter_mut().skip(1) {
            for i in 0..20 {
                let x = i as f64 * 0.1;
                slot.push((vec![x], vec![2.0 + 3.0 * x]));
            }
        }
        let m = ExpectationModel::fit(&pairs).unwrap();
        let (mu, s) = m.expected(3, &[0.5]).unwrap();
        assert!((mu[0] - 3.5).abs() < 1e-10);
        assert_eq!(s[0], SIGMA_FLOOR);

        // too few pairs at position 2 → population mean
        pairs[2] = vec![(vec![0.0], vec![1.0]), (vec![1.0], vec![3.0])];
        let m = ExpectationModel::fit(&pairs).unwrap();
        let (mu, s) = m.expected(2, &[10.0]).unwrap();
        assert!((mu[0] - 2.0).abs() < 1e-12);
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(m.expected(0, &[1.0]).is_err());
        assert!(m.expected(6, &[1.0]).is_err());
    }

    #[test]
    fn scorer_zero_targets() {
        let q = QuantizerSpec::new(vec![0.0; 3], vec![1.0; 3], 8).unwrap();
        let mut rng = seed::rng(0);
        let pairs: Vec<(TokenSequence, Vec<f64>)> = (0..200)
            .map(|_| {
                let z: Vec<f64> = (0..3).map(|_| rand::Rng::random(&mut rng)).collect();
                (q.quantize(&z).unwrap(), vec![0.0, 0.0])
            })
            .collect();
        let cfg = ScorerConfig {
            epochs: 60,
            ..Default::default()
        };
        let (p, rep) = train_scorer(&pairs, &q, &cfg, 1).unwrap();
        assert!(rep.final_loss < 1e-4, "{}", rep.final_loss);
        let out = p.predict(&[pairs[0].0.clone()]).unwrap();
        assert!(out[0].iter().all(|v| v.abs() < 2e-2));
        let (p2, _) = train_scorer(&pairs, &q, &cfg, 1).unwrap();
        assert_eq!(p, p2);
    }
}
