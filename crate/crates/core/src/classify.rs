//! Conversion classifier over baseline (and optionally generated) latents,
//! plus the evaluation metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{Label, TrajectoryRecord, GRID_LEN};
use crate::error::{Error, Result};
use crate::guidance::GeneratedTrajectory;
use crate::numkernel::{ones_column, sigmoid, Adam, AdamConfig, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    BaselineOnly,
    Full,
}

/// `[Z₀]` or `[Z₀, Ẑ₁..Ẑ₅]`, unstandardized.
pub fn raw_features(record: &TrajectoryRecord, generated: Option<&GeneratedTrajectory>, mode: FeatureMode) -> Result<Vec<f64>> {
    let mut f = record.baseline().to_vec();
    if mode == FeatureMode::Full {
        let g = generated.ok_or_else(|| Error::Invalid(format!("{}: full features need a generated trajectory", record.patient_id)))?;
        if g.patient_id != record.patient_id {
            return Err(Error::Invalid(format!("trajectory {} paired with record {}", g.patient_id, record.patient_id)));
        }
        for pos in 1..GRID_LEN {
            let step = g
                .steps
                .iter()
                .find(|s| s.position == pos)
                .ok_or_else(|| Error::Invalid(format!("{}: generated position {pos} missing", record.patient_id)))?;
            if step.latent.len() != record.latent_dim() {
                return Err(Error::shape("featurize", format!("generated latent has {} dims", step.latent.len())));
            }
            f.extend_from_slice(&step.latent);
        }
    }
    Ok(f)
}

/// Per-feature standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("standardizer rows"));
        }
        let n = rows.len() as f64;
        let f = rows[0].len();
        let mean: Vec<f64> = (0..f).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let std = (0..f)
            .map(|k| {
                let s = (rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(Error::shape("standardize", format!("{} features, fitted {}", row.len(), self.mean.len())));
        }
        Ok(row.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub l2: f64,
    pub lr: f64,
    pub steps: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            lr: 0.05,
            steps: 500,
        }
    }
}

/// Logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub mode: FeatureMode,
    pub standardizer: Standardizer,
    /// F×1.
    pub weights: Tensor,
    /// 1×1.
    pub bias: Tensor,
}

/// Mean cross-entropy plus `l2/2·‖w‖²`, with gradients for (weights, bias).
/// `x` is already standardized.
pub fn classifier_loss(weights: &Tensor, bias: &Tensor, x: &Tensor, labels: &[usize], l2: f64) -> Result<(f64, [Tensor; 2])> {
    let mut tape = Tape::new();
    let (w, b) = (tape.param(weights), tape.param(bias));
    let xv = tape.constant(x.clone());
    let ones = tape.constant(ones_column(x.rows()));
    // logits [0, z]: class 1 (pMCI) has probability sigmoid(z)
    let lift = tape.constant(Tensor::matrix(1, 2, vec![0.0, 1.0])?);
    let xw = tape.matmul(xv, w)?;
    let bb = tape.matmul(ones, b)?;
    let z = tape.add(xw, bb)?;
    let logits = tape.matmul(z, lift)?;
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    let loss = if l2 > 0.0 {
        let sq = tape.mul(w, w)?;
        let pen = tape.sum(sq)?;
        let pen = tape.scale(pen, 0.5 * l2)?;
        tape.add(ce, pen)?
    } else {
        ce
    };
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).data()[0], [g.get_or_zeros(w, weights), g.get_or_zeros(b, bias)]))
}

fn label_index(l: Label) -> usize {
    usize::from(l.is_positive())
}

/// Full-batch Adam from zero weights; deterministic.
pub fn train_classifier(rows: &[Vec<f64>], labels: &[Label], mode: FeatureMode, config: &ClassifierConfig) -> Result<ClassifierParams> {
    if rows.len() != labels.len() {
        return Err(Error::shape("train_classifier", format!("{} rows, {} labels", rows.len(), labels.len())));
    }
    if rows.is_empty() {
        return Err(Error::Empty("classifier training rows"));
    }
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Invalid("classifier needs both classes in training".into()));
    }
    let standardizer = Standardizer::fit(rows)?;
    let x = Tensor::from_rows(&rows.iter().map(|r| standardizer.apply(r)).collect::<Result<Vec<_>>>()?)?;
    let y: Vec<usize> = labels.iter().map(|&l| label_index(l)).collect();
    let mut weights = Tensor::zeros(&[x.cols(), 1]);
    let mut bias = Tensor::zeros(&[1, 1]);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &[&weights, &bias],
    );
    for _ in 0..config.steps {
        let (_, grads) = classifier_loss(&weights, &bias, &x, &y, config.l2)?;
        adam.step(&mut [&mut weights, &mut bias], &grads)?;
    }
    Ok(ClassifierParams {
        mode,
        standardizer,
        weights,
        bias,
    })
}

impl ClassifierParams {
    pub fn logit(&self, row: &[f64]) -> Result<f64> {
        let x = self.standardizer.apply(row)?;
        Ok(self.bias.data()[0] + x.iter().zip(self.weights.data()).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Probability of pMCI.
    pub fn predict_proba(&self, row: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(row)?))
    }

    pub fn predict_label(&self, row: &[f64]) -> Result<Label> {
        Ok(if self.predict_proba(row)? >= 0.5 { Label::Pmci } else { Label::Smci })
    }
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub acc: f64,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    /// `None` when one class is absent.
    pub auc: Option<f64>,
    pub n: usize,
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// Area under the ROC curve by the Mann-Whitney rank statistic with
/// mid-ranks for ties.
pub fn rank_auc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

pub fn compute_metrics(labels: &[Label], probs: &[f64], threshold: f64) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(Error::Empty("metric labels"));
    }
    if labels.len() != probs.len() {
        return Err(Error::shape("metrics", format!("{} labels, {} scores", labels.len(), probs.len())));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("metric scores".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (l, &p) in labels.iter().zip(probs) {
        match (l.is_positive(), p >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let positive: Vec<bool> = labels.iter().map(|l| l.is_positive()).collect();
    Ok(MetricsReport {
        tp,
        fp,
        tn,
        fn_,
        acc: (tp + tn) as f64 / labels.len() as f64,
        sen: ratio(tp, tp + fn_),
        spe: ratio(tn, tn + fp),
        auc: rank_auc(&positive, probs),
        n: labels.len(),
    })
}

/// One metrics CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub mode: String,
    pub acc: f64,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub auc: Option<f64>,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
    pub schema_version: u32,
}

impl MetricsRow {
    pub fn new(run_id: &str, mode: &str, m: &MetricsReport, seed: u64, config_hash: &str) -> Self {
        Self {
            run_id: run_id.to_owned(),
            mode: mode.to_owned(),
            acc: m.acc,
            sen: m.sen,
            spe: m.spe,
            auc: m.auc,
            n: m.n,
            seed,
            config_hash: config_hash.to_owned(),
            schema_version: crate::io::SCHEMA_VERSION,
        }
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    crate::io::write_atomic(path, &metrics_csv(rows)?)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}
