use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use trajdiff::classify::{compute_metrics, rank_auc, train_classifier, ClassifierConfig, FeatureMode};
use trajdiff::cohort::Label;
use trajdiff::seed;

/// Pairwise AUC with ties counted as one half.
pub fn brute_auc(positive: &[bool], scores: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn rank_auc_matches_brute_force_on_random_instances() {
    let mut rng = seed::rng(12);
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        let mut positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        positive[0] = true;
        positive[1] = false;
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..1.0f64) * 10.0).floor() / 10.0).collect();
        let a = rank_auc(&positive, &scores).unwrap();
        assert!((a - brute_auc(&positive, &scores)).abs() <= 1e-12);
    }
    let worked = rank_auc(&[true, false, true, false], &[0.9, 0.8, 0.7, 0.1]).unwrap();
    assert!((worked - 0.75).abs() <= 1e-12);
}

#[test]
fn permuted_labels_give_chance_auc() {
    for s in 0..5u64 {
        let mut rng = seed::rng_for(100, &[s]);
        let rows: Vec<Vec<f64>> = (0..600).map(|_| (0..10).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let truth: Vec<Label> = rows.iter().map(|r| if r[0] + r[1] > 0.0 { Label::Pmci } else { Label::Smci }).collect();
        let mut labels = truth.clone();
        labels.shuffle(&mut rng);
        let (train, test) = rows.split_at(400);
        let model = train_classifier(train, &labels[..400], FeatureMode::BaselineOnly, &ClassifierConfig::default()).unwrap();
        let probs: Vec<f64> = test.iter().map(|r| model.predict_proba(r).unwrap()).collect();
        let m = compute_metrics(&labels[400..], &probs, 0.5).unwrap();
        let auc = m.auc.unwrap();
        assert!((0.4..=0.6).contains(&auc), "seed {s}: AUC {auc}");
    }
}

#[test]
fn probability_matches_scalar_sigmoid() {
    let mut rng = seed::rng(13);
    let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..5).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let labels: Vec<Label> = rows.iter().map(|r| if r[2] > 0.3 { Label::Pmci } else { Label::Smci }).collect();
    let model = train_classifier(&rows, &labels, FeatureMode::BaselineOnly, &ClassifierConfig::default()).unwrap();
    for r in &rows {
        let mut z = model.bias.data()[0];
        for k in 0..5 {
            z += (r[k] - model.standardizer.mean[k]) / model.standardizer.std[k] * model.weights.data()[k];
        }
        let p = 1.0 / (1.0 + (-z).exp());
        assert!((model.predict_proba(r).unwrap() - p).abs() <= 1e-15);
    }
}

proptest! {
    #[test]
    fn auc_invariant_under_increasing_transform(
        scores in prop::collection::vec(-3.0f64..3.0, 4..80),
        flips in prop::collection::vec(any::<bool>(), 80),
    ) {
        let mut positive: Vec<bool> = flips[..scores.len()].to_vec();
        positive[0] = true;
        positive[1] = false;
        let mapped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + s.powi(3)).collect();
        let a = rank_auc(&positive, &scores).unwrap();
        let b = rank_auc(&positive, &mapped).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn metric_identities(labels in prop::collection::vec(any::<bool>(), 1..60), probs in prop::collection::vec(0.0f64..1.0, 60)) {
        let labels: Vec<Label> = labels.iter().map(|&p| if p { Label::Pmci } else { Label::Smci }).collect();
        let m = compute_metrics(&labels, &probs[..labels.len()], 0.5).unwrap();
        let n = labels.len();
        prop_assert_eq!(m.tp + m.fp + m.tn + m.fn_, n);
        prop_assert!((m.acc - (m.tp + m.tn) as f64 / n as f64).abs() <= 1e-15);
        if let Some(sen) = m.sen {
            prop_assert!((sen - m.tp as f64 / (m.tp + m.fn_) as f64).abs() <= 1e-15);
        }
        if let Some(spe) = m.spe {
            prop_assert!((spe - m.tn as f64 / (m.tn + m.fp) as f64).abs() <= 1e-15);
        }
    }
}
