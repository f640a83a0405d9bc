mod common;

use proptest::prelude::*;
use rand::Rng as _;
use trajdiff::cohort::{generate_cohort, CohortConfig, TrajectoryRecord, GRID_LEN};
use trajdiff::diffusion::{DiffusionConfig, DiffusionModel};
use trajdiff::guidance::{
    fit_quantizer, guided_sample_batch, latent_pairs, plausibility_score, replay_matches, scorer_pairs, select_best,
    train_scorer, BiomarkerPredictor, CandidateScorer, ExpectationModel, LatentGuide, QuantizerSpec, ScorerConfig,
    ScorerParams,
};
use trajdiff::seed;

/// Deviation bound and noise level of quantize→dequantize at V = 64.
pub fn quantization_check(samples: usize, seed_value: u64) -> (f64, f64) {
    let mut rng = seed::rng(seed_value);
    let d = 16;
    let lower: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..-0.5)).collect();
    let upper: Vec<f64> = lower.iter().map(|l| l + rng.random_range(0.5..6.0)).collect();
    let q = QuantizerSpec::new(lower.clone(), upper.clone(), 64).unwrap();
    let mut worst_ratio: f64 = 0.0;
    let mut sq = vec![0.0; d];
    for _ in 0..samples {
        let z: Vec<f64> = (0..d).map(|k| rng.random_range(lower[k]..upper[k])).collect();
        let back = q.dequantize(&q.quantize(&z).unwrap()).unwrap();
        for k in 0..d {
            let e = back[k] - z[k];
            worst_ratio = worst_ratio.max(e.abs() / (q.bin_width(k) / 2.0));
            sq[k] += e * e;
        }
    }
    let worst_rms_dev = (0..d)
        .map(|k| ((sq[k] / samples as f64).sqrt() / (q.bin_width(k) / 12f64.sqrt()) - 1.0).abs())
        .fold(0.0, f64::max);
    (worst_ratio, worst_rms_dev)
}

#[test]
fn quantization_error_is_bounded_and_uniform() {
    let (ratio, rms_dev) = quantization_check(100_000, 1);
    assert!(ratio <= 1.0 + 1e-9, "deviation {ratio} half-bins");
    assert!(rms_dev < 0.05, "RMS off by {rms_dev}");
}

fn cohort(n: usize, seed_value: u64) -> Vec<TrajectoryRecord> {
    let config = CohortConfig {
        n_patients: n,
        seed: seed_value,
        ..Default::default()
    };
    generate_cohort(&config).unwrap().into_iter().map(|p| p.record).collect()
}

#[test]
fn scorer_learns_the_biomarker_readout() {
    let records = cohort(400, 2);
    let lat: Vec<&[f64]> = records.iter().flat_map(|r| r.latents.iter().flatten().map(Vec::as_slice)).collect();
    let q = fit_quantizer(&lat, 64).unwrap();
    let pairs = scorer_pairs(&records, &q).unwrap();
    let (params, report) = train_scorer(&pairs, &q, &ScorerConfig::default(), 5).unwrap();
    assert!(report.mean_r2() > 0.5, "held-out R² {:?}", report.heldout_r2);

    // Same output from a plain-loop forward pass.
    let tokens: Vec<Vec<usize>> = pairs.iter().take(50).map(|p| p.0.clone()).collect();
    let got = params.predict(&tokens).unwrap();
    for (seq, out) in tokens.iter().zip(&got) {
        let e = params.embed.cols();
        let mut pooled = vec![0.0; e];
        for &t in seq {
            for j in 0..e {
                pooled[j] += params.embed.get(t, j) / seq.len() as f64;
            }
        }
        for k in 0..params.out_dim() {
            let mut y = params.bias.get(0, k);
            for j in 0..e {
                y += pooled[j] * params.head.get(j, k);
            }
            assert!((y - out[k]).abs() <= 1e-12);
        }
    }
}

#[test]
fn scorer_is_pure() {
    let mut rng = seed::rng(3);
    let p = ScorerParams::init(4, 32, 8, 3, &mut rng);
    let toks = vec![vec![0, 9, 17, 30], vec![1, 8, 16, 31]];
    assert_eq!(p.predict(&toks).unwrap(), p.predict(&toks).unwrap());
    assert_eq!(p.predict(&toks).unwrap()[0].len(), 3);
}

#[test]
fn latent_expectation_recovers_the_dynamics() {
    let config = CohortConfig {
        n_patients: 3000,
        prior_pmci: 0.0,
        seed: 4,
        ..Default::default()
    };
    let records: Vec<TrajectoryRecord> = generate_cohort(&config).unwrap().into_iter().map(|p| p.record).collect();
    let model = ExpectationModel::fit(&latent_pairs(&records)).unwrap();
    let d = config.latent_dim;
    for tau in 1..GRID_LEN {
        let c = &model.coef[tau - 1];
        let want = config.decay.powi(tau as i32);
        let noise = config.process_noise * (0..tau).map(|k| config.decay.powi(2 * k as i32)).sum::<f64>().sqrt();
        for i in 0..d {
            assert!(c[0][i].abs() < 0.05, "intercept {}", c[0][i]);
            for j in 0..d {
                let expect = if i == j { want } else { 0.0 };
                assert!((c[1 + j][i] - expect).abs() < 0.05, "tau {tau} coef[{j}][{i}] = {}", c[1 + j][i]);
            }
            let s = model.sigma[tau - 1][i];
            assert!((s / noise - 1.0).abs() < 0.1, "tau {tau} sigma {s} vs {noise}");
        }
    }
}

#[test]
fn latent_guide_ranks_by_standardized_distance() {
    let records = cohort(300, 6);
    let guide = LatentGuide {
        expected: ExpectationModel::fit(&latent_pairs(&records)).unwrap(),
    };
    let mut rng = seed::rng(8);
    let r = &records[0];
    for tau in 1..GRID_LEN {
        let cands: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..16).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let scores = guide.score(tau, r, &cands).unwrap();
        let c = &guide.expected.coef[tau - 1];
        let sig = &guide.expected.sigma[tau - 1];
        let brute: Vec<f64> = cands
            .iter()
            .map(|z| {
                (0..16)
                    .map(|k| {
                        let mu = c[0][k] + (0..16).map(|j| r.baseline()[j] * c[1 + j][k]).sum::<f64>();
                        ((z[k] - mu) / sig[k]).powi(2)
                    })
                    .sum()
            })
            .collect();
        let mut a: Vec<usize> = (0..20).collect();
        let mut b = a.clone();
        a.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
        b.sort_by(|&i, &j| brute[i].total_cmp(&brute[j]));
        assert_eq!(a, b);
    }
}

fn small_model(seed_value: u64) -> DiffusionModel {
    let config = DiffusionConfig {
        hidden: 16,
        steps: 8,
        ..Default::default()
    };
    DiffusionModel::new(&config, 16, &mut seed::rng(seed_value)).unwrap()
}

#[test]
fn single_candidate_with_a_scorer_is_the_unguided_sampler() {
    let records = cohort(12, 9);
    let model = small_model(1);
    let guide = LatentGuide {
        expected: ExpectationModel::fit(&latent_pairs(&records)).unwrap(),
    };
    let a = guided_sample_batch(&model, Some(&guide), &records, 1, 77).unwrap();
    let b = guided_sample_batch(&model, None, &records, 1, 77).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.iter().all(|t| t.steps.len() == GRID_LEN - 1));
}

#[test]
fn guided_trajectories_replay_from_recorded_seeds() {
    let records = cohort(10, 10);
    let model = small_model(2);
    let guide = LatentGuide {
        expected: ExpectationModel::fit(&latent_pairs(&records)).unwrap(),
    };
    let trajs = guided_sample_batch(&model, Some(&guide), &records, 5, 78).unwrap();
    for (r, t) in records.iter().zip(&trajs) {
        assert!(replay_matches(&model, r, t).unwrap());
        for s in &t.steps {
            assert_eq!(s.scores.len(), 5);
            assert_eq!(s.selected, select_best(&s.scores).unwrap());
        }
        // Replaying against a different history must not match: later steps
        // are conditioned on the earlier selections.
        let mut tampered = t.clone();
        tampered.steps[0].latent[0] += 1.0;
        tampered.steps[0].selected = (t.steps[0].selected + 1) % 5;
        assert!(!replay_matches(&model, r, &tampered).unwrap());
    }
    // Chunking does not change per-patient output.
    let one = guided_sample_batch(&model, Some(&guide), &records[3..4], 5, 78).unwrap();
    assert_eq!(one[0], trajs[3]);
}

proptest! {
    #[test]
    fn selection_ignores_monotone_rescaling(scores in prop::collection::vec(-50.0f64..50.0, 1..30), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mapped: Vec<f64> = scores.iter().map(|s| (a * s + b).tanh() + a * s).collect();
        prop_assert_eq!(select_best(&scores).unwrap(), select_best(&mapped).unwrap());
    }

    #[test]
    fn plausibility_is_nonpositive(y in prop::collection::vec(-5.0f64..5.0, 4), mu in prop::collection::vec(-5.0f64..5.0, 4),
                                   s in prop::collection::vec(0.01f64..3.0, 4)) {
        let v = plausibility_score(&y, &mu, &s).unwrap();
        prop_assert!(v <= 0.0);
        prop_assert_eq!(plausibility_score(&mu, &mu, &s).unwrap(), 0.0);
    }

    #[test]
    fn tokens_stay_in_vocabulary(z in prop::collection::vec(-100.0f64..100.0, 8)) {
        let q = QuantizerSpec::new(vec![-1.0; 8], vec![2.0; 8], 16).unwrap();
        let t = q.quantize(&z).unwrap();
        prop_assert_eq!(t.len(), 8);
        for (k, tok) in t.iter().enumerate() {
            prop_assert!(*tok >= k * 16 && *tok < (k + 1) * 16);
        }
    }
}
