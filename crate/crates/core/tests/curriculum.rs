use trajdiff::cohort::{apply_stratum, generate_cohort, CohortConfig, Flag, Stratum};
use trajdiff::curriculum::{impute_final, train_extrapolation_phase};
use trajdiff::diffusion::{DiffusionConfig, DiffusionModel};
use trajdiff::seed;

/// Imputed suffix points against the simulated truth: per-coordinate RMS
/// error grows from the first imputed step to the second and stays under
/// 3·σ_proc·step.
#[test]
fn final_suffix_error_tracks_process_noise() {
    let cohort = CohortConfig {
        n_patients: 800,
        ..CohortConfig::default()
    };
    let patients = generate_cohort(&cohort).unwrap();
    let (train, held) = patients.split_at(600);
    let pool: Vec<_> = train.iter().map(|p| p.record.clone()).collect();

    let config = DiffusionConfig {
        hidden: 64,
        ..DiffusionConfig::default()
    };
    let mut rng = seed::rng(5);
    let mut model = DiffusionModel::new(&config, cohort.latent_dim, &mut rng).unwrap();
    train_extrapolation_phase(&mut model, &pool, 2, 40, config.batch_size, &mut rng).unwrap();

    let truncated: Vec<_> = held.iter().map(|p| apply_stratum(&p.record, Stratum::Final(2), &mut rng)).collect();
    let imputed = impute_final(&model, &truncated, 2, 9).unwrap();
    assert_eq!(imputed.len(), held.len());

    let mut sq = [0.0; 2];
    let mut count = 0usize;
    for (r, p) in imputed.iter().zip(held) {
        assert_eq!(r.patient_id, p.record.patient_id);
        for (step, pos) in [4usize, 5].into_iter().enumerate() {
            assert_eq!(r.flags[pos], Flag::Imputed);
            let z = r.latents[pos].as_ref().unwrap();
            let truth = p.record.latents[pos].as_ref().unwrap();
            sq[step] += z.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        count += cohort.latent_dim;
    }
    let rms = sq.map(|s| (s / count as f64).sqrt());
    let sigma = cohort.process_noise;
    eprintln!("rms error by step {rms:?}, sigma_proc {sigma}");
    assert!(rms[1] > rms[0], "{rms:?}");
    assert!(rms[0] < 3.0 * sigma, "{rms:?}");
    assert!(rms[1] < 6.0 * sigma, "{rms:?}");
}
