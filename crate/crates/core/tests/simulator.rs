use agis_core::model::ObsMeta;
use agis_core::predict_abscissa;
use agis_core::simulator::{
    along_scan_angle, generate_transits, perturb_catalog, random_calibration,
    synthesize_observations, NoiseModel, PerturbMagnitudes, ScanLaw, TruthCatalog,
};
use agis_core::solver::{AttitudeModel, CalibrationTable, GlobalParams};
use agis_core::units::MAS;

const EPOCH: f64 = 913.125;

#[test]
fn default_law_gives_about_eighty_transits_and_calibrated_noise() {
    let law = ScanLaw::default();
    // ≈ 78 observations per source, so this clears 10^5 observations
    let truth = TruthCatalog::generate(1400, EPOCH, 11);
    let cal = random_calibration(law.n_calib_units(), 2.0 * MAS, 4);
    let glob = GlobalParams { g: 1e-4 };
    let clean = synthesize_observations(
        &truth,
        &law,
        &cal,
        &glob,
        &NoiseModel {
            sigma_al: 0.0,
            seed: 7,
        },
    )
    .unwrap();
    let mean = clean.len() as f64 / truth.len() as f64;
    assert!((60.0..=100.0).contains(&mean), "mean multiplicity {mean}");

    let att = AttitudeModel::zeros(law.mission_start, law.mission_end, 0.25);
    for o in clean.iter().step_by(97) {
        let eta = predict_abscissa(
            &truth.sources[o.source_id as usize],
            &att,
            &cal,
            &glob,
            &ObsMeta::from(o),
            &law,
        )
        .unwrap();
        assert!((eta - o.abscissa_obs).abs() < 1e-12);
    }

    let noisy = synthesize_observations(
        &truth,
        &law,
        &cal,
        &glob,
        &NoiseModel {
            sigma_al: MAS,
            seed: 7,
        },
    )
    .unwrap();
    assert!(noisy.len() >= 100_000, "{}", noisy.len());
    assert_eq!(noisy.len(), clean.len());
    let n = noisy.len() as f64;
    let d: Vec<f64> = noisy
        .iter()
        .zip(&clean)
        .map(|(a, b)| a.abscissa_obs - b.abscissa_obs)
        .collect();
    let m = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd / MAS - 1.0).abs() < 0.02, "sample sd {} mas", sd / MAS);
    assert!(noisy.iter().all(|o| o.sigma == MAS));
}

#[test]
fn observations_are_sorted_and_reproducible() {
    let law = ScanLaw::default();
    let truth = TruthCatalog::generate(40, EPOCH, 3);
    let cal = CalibrationTable::zeros(law.n_calib_units());
    let noise = NoiseModel {
        sigma_al: MAS,
        seed: 9,
    };
    let a = synthesize_observations(&truth, &law, &cal, &GlobalParams::default(), &noise).unwrap();
    let b = synthesize_observations(&truth, &law, &cal, &GlobalParams::default(), &noise).unwrap();
    assert_eq!(a, b);
    assert!(a
        .windows(2)
        .all(|w| (w[0].source_id, w[0].t) < (w[1].source_id, w[1].t)));
    let other = synthesize_observations(
        &truth,
        &law,
        &cal,
        &GlobalParams::default(),
        &NoiseModel { seed: 10, ..noise },
    )
    .unwrap();
    assert_ne!(a, other);
}

#[test]
fn transits_sit_on_the_field_centres() {
    let law = ScanLaw::default();
    let truth = TruthCatalog::generate(30, EPOCH, 5);
    for s in &truth.sources {
        let transits = generate_transits(&law, s, (law.mission_start, law.mission_end));
        for tr in &transits {
            let (eta, across) = along_scan_angle(&law, s, tr.fov, tr.t);
            assert!(eta.abs() < 1e-9, "{eta}");
            assert!(across.abs() <= law.across_scan_half_width);
            assert_eq!(tr.calib_unit, law.calib_unit(tr.fov, tr.t));
        }
        assert!(transits.windows(2).all(|w| w[0].t < w[1].t));
        assert!(generate_transits(&law, s, (100.0, 100.0)).is_empty());
    }
}

#[test]
fn perturbation_statistics() {
    let truth = TruthCatalog::generate(10_000, EPOCH, 8);
    let mags = PerturbMagnitudes {
        position_mas: 100.0,
        parallax_mas: 10.0,
        pm_masyr: 5.0,
    };
    let start = perturb_catalog(&truth, &mags, 21);
    assert_eq!(start, perturb_catalog(&truth, &mags, 21));
    let mut sums = [0.0; 5];
    for (a, b) in start.iter().zip(&truth.sources) {
        for (s, d) in sums.iter_mut().zip(a.difference(b)) {
            *s += (d / MAS) * (d / MAS);
        }
    }
    let rms = sums.map(|s| (s / truth.len() as f64).sqrt());
    let expected = [100.0, 100.0, 10.0, 5.0, 5.0];
    for (r, e) in rms.iter().zip(expected) {
        assert!((r / e - 1.0).abs() < 0.05, "rms {rms:?}");
    }

    let zero = PerturbMagnitudes {
        position_mas: 0.0,
        parallax_mas: 0.0,
        pm_masyr: 0.0,
    };
    assert_eq!(perturb_catalog(&truth, &zero, 21), truth.sources);
}
