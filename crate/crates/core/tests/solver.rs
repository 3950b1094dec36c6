mod common;

use agis_core::model::Observation;
use agis_core::solver::{
    accumulate_block_partials, attitude_update, calibration_update, global_update, outer_iteration,
    run_agis, secondary_solve, source_update, AttitudeModel, BlockKind, BlockPartials,
    GlobalParams, PartialNormalEquations, SolveError, SolverConfig, Termination, ATTITUDE_DAMPING,
};
use agis_core::units::MAS;
use common::Desk;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn source_update_examples() {
    let desk = Desk::new(6, 0.0, 30.0, 31);
    let (att, cal, glob) = (
        desk.zero_attitude(),
        desk.cal_truth.clone(),
        desk.glob_truth,
    );
    for (id, truth) in desk.truth.sources.iter().enumerate() {
        let obs = desk.source_obs(id as u64);
        let fit = source_update(&obs, &att, &cal, &glob, truth, &desk.law).unwrap();
        let d = fit.params.difference(truth);
        assert!(d.iter().all(|x| x.abs() < 1e-12), "{d:?}");

        let start = truth.apply_update(&[100.0 * MAS, -100.0 * MAS, 0.0, 0.0, 0.0]);
        let fit = source_update(&obs, &att, &cal, &glob, &start, &desk.law).unwrap();
        let d = fit.params.difference(truth);
        assert!(d.iter().all(|x| x.abs() < 1e-9), "{d:?}");
        assert!(fit.covariance.iter().all(|c| c.is_finite()));
        assert!(
            (fit.covariance - fit.covariance.transpose()).amax() <= 1e-12 * fit.covariance.amax()
        );

        assert!(matches!(
            source_update(&obs[..2], &att, &cal, &glob, truth, &desk.law),
            Err(SolveError::UnderdeterminedSource { .. })
        ));
        let mut bad = obs.clone();
        bad[3].abscissa_obs = f64::NAN;
        assert!(source_update(&bad, &att, &cal, &glob, truth, &desk.law).is_err());
    }
}

fn single(desk: &Desk, o: &Observation, att: &AttitudeModel) -> BlockPartials {
    let s = desk.truth.sources[o.source_id as usize];
    accumulate_block_partials(
        &[(s, std::slice::from_ref(o))],
        att,
        &desk.cal_truth,
        &GlobalParams::default(),
        &desk.law,
    )
    .unwrap()
}

#[test]
fn accumulation_examples() {
    let desk = Desk::new(8, 1.0, 30.0, 32);
    let att = desk.zero_attitude();
    let glob = GlobalParams::default();

    let empty = accumulate_block_partials(&[], &att, &desk.cal_truth, &glob, &desk.law).unwrap();
    assert_eq!(
        empty,
        BlockPartials::zeros(att.n_knots(), desk.cal_truth.len())
    );
    assert_eq!(empty.n_obs(), 0);

    // one observation: each block is the outer product of its partials row
    let o = desk.obs[5];
    let p = single(&desk, &o, &att);
    let d = agis_core::observation_partials(
        &desk.truth.sources[o.source_id as usize],
        &att,
        &desk.cal_truth,
        &glob,
        &(&o).into(),
        &desk.law,
    )
    .unwrap();
    let w = 1.0 / (o.sigma * o.sigma);
    let mut row = DVector::<f64>::zeros(att.n_knots());
    for (k, a) in d.attitude {
        row[k] += a;
    }
    let expected: DMatrix<f64> = &row * row.transpose() * w;
    let dense = p.attitude.to_dense();
    assert!((&dense - &expected).amax() <= 1e-15 * expected.amax());
    let rank = dense
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .filter(|s| **s > 1e-12 * dense.amax())
        .count();
    assert_eq!(rank, 1);
    assert_eq!(
        p.calibration
            .get(o.calib_unit as usize, o.calib_unit as usize),
        w
    );
    assert_eq!(p.global.get(0, 0), w * d.global * d.global);
    assert_eq!(p.n_obs(), 1);

    // the batch equals the running sum of single-observation accumulators
    let groups: Vec<(agis_core::SourceParams, Vec<Observation>)> = (0..8u64)
        .map(|id| (desk.truth.sources[id as usize], desk.source_obs(id)))
        .collect();
    let batch: Vec<_> = groups.iter().map(|(s, o)| (*s, o.as_slice())).collect();
    let all = accumulate_block_partials(&batch, &att, &desk.cal_truth, &glob, &desk.law).unwrap();
    let mut sum = BlockPartials::zeros(att.n_knots(), desk.cal_truth.len());
    for (_, obs) in &groups {
        for o in obs {
            sum.merge_from(&single(&desk, o, &att)).unwrap();
        }
    }
    assert_eq!(all, sum);
    assert_eq!(all.n_obs(), desk.obs.len() as u64);
}

#[test]
fn attitude_update_matches_dense_solve() {
    let desk = Desk::new(4, 1.0, 30.0, 33);
    let span = desk.law.mission_end - desk.law.mission_start;
    let att = AttitudeModel::zeros(desk.law.mission_start, desk.law.mission_end, span / 9.0);
    assert_eq!(att.n_knots(), 10);
    let obs: Vec<Observation> = desk.obs.iter().take(200).copied().collect();
    assert_eq!(obs.len(), 200);
    let mut groups: Vec<(agis_core::SourceParams, Vec<Observation>)> = Vec::new();
    for o in &obs {
        match groups.last_mut() {
            Some((_, v)) if v[0].source_id == o.source_id => v.push(*o),
            _ => groups.push((
                desk.truth.sources[o.source_id as usize].apply_update(&[
                    20.0 * MAS,
                    0.0,
                    0.0,
                    0.0,
                    0.0,
                ]),
                vec![*o],
            )),
        }
    }
    let batch: Vec<_> = groups.iter().map(|(s, o)| (*s, o.as_slice())).collect();
    let p = accumulate_block_partials(
        &batch,
        &att,
        &desk.cal_truth,
        &GlobalParams::default(),
        &desk.law,
    )
    .unwrap();
    let banded = attitude_update(&p.attitude, ATTITUDE_DAMPING).unwrap();

    let n = p.attitude.to_dense();
    let lambda = ATTITUDE_DAMPING * n.trace();
    let dense = (&n + DMatrix::identity(10, 10) * lambda)
        .lu()
        .solve(&DVector::from_vec(p.attitude.rhs.clone()))
        .unwrap();
    for (a, b) in banded.delta.iter().zip(dense.iter()) {
        assert!((a - b).abs() <= 1e-10 * dense.amax(), "{a} vs {b}");
    }
}

#[test]
fn global_signal_is_recovered_in_one_update() {
    let desk = Desk::new(60, 0.0, 30.0, 34);
    let groups: Vec<_> = (0..60u64)
        .map(|id| (desk.truth.sources[id as usize], desk.source_obs(id)))
        .collect();
    let batch: Vec<_> = groups.iter().map(|(s, o)| (*s, o.as_slice())).collect();
    let p = accumulate_block_partials(
        &batch,
        &desk.zero_attitude(),
        &desk.cal_truth,
        &GlobalParams::default(),
        &desk.law,
    )
    .unwrap();
    let dg = global_update(&p.global).unwrap();
    assert!((dg / common::G_TRUTH - 1.0).abs() < 0.01, "Δg = {dg}");
}

#[test]
fn truth_is_a_fixed_point() {
    let desk = Desk::new(80, 0.0, 30.0, 35);
    let state = desk.truth_state();
    let mut exec = desk.executor(25);
    let (next, rec) = outer_iteration(&state, &mut exec, &desk.config, &desk.law).unwrap();
    assert!(rec.max_source_update < 1e-11);
    assert!(rec.max_attitude_update < 1e-11);
    assert!(rec.max_calibration_update < 1e-11);
    assert!(rec.global_update.abs() < 1e-11);
    assert!(desk.max_source_error(&next.sources) < 1e-11);

    // already converged: stops after one iteration
    let out = run_agis(
        state,
        &mut desk.executor(25),
        &desk.config,
        &desk.law,
        &desk.anchors(),
    )
    .unwrap();
    assert_eq!(out.report.records.len(), 1);
    assert_eq!(out.report.termination, Termination::UpdateBelowTolerance);
    assert_eq!(out.report.termination.describe(), "update below tolerance");
}

#[test]
fn zero_noise_run_converges_with_block_descent() {
    let desk = Desk::new(150, 0.0, 30.0, 36);
    let mut exec = desk.executor(40);
    let out = run_agis(
        desk.start_state(37),
        &mut exec,
        &desk.config,
        &desk.law,
        &desk.anchors(),
    )
    .unwrap();
    assert!(
        out.report.termination.converged(),
        "{:?}",
        out.report.termination
    );
    for r in &out.report.records {
        assert!(r.source_block_descends(1e-9, 1e-20), "{r:?}");
    }
    assert!(desk.max_source_error(&out.state.sources) < 1e-9);
    let (_, last) = outer_iteration(&out.state, &mut exec, &desk.config, &desk.law).unwrap();
    assert!(last.rms_residual < 1e-10, "{}", last.rms_residual);
    let g_err = (out.state.global.g - common::G_TRUTH).abs();
    assert!(
        g_err * agis_core::solver::aberration_scale(&desk.law) < 1e-11,
        "g error {g_err}"
    );
}

#[test]
fn invalid_configurations_are_rejected() {
    let desk = Desk::new(3, 0.0, 30.0, 38);
    for config in [
        SolverConfig {
            max_outer: 0,
            ..desk.config
        },
        SolverConfig {
            tol_update: 0.0,
            ..desk.config
        },
        SolverConfig {
            primary_fraction: 0.0,
            ..desk.config
        },
        SolverConfig {
            primary_fraction: 1.5,
            ..desk.config
        },
    ] {
        assert!(matches!(
            run_agis(
                desk.start_state(1),
                &mut desk.executor(10),
                &config,
                &desk.law,
                &[]
            ),
            Err(SolveError::InvalidConfig(_))
        ));
    }
}

#[test]
fn secondary_solve_examples() {
    let mut desk = Desk::new(40, 0.0, 30.0, 39);
    // source 39 keeps only three observations
    let mut seen = 0;
    desk.obs.retain(|o| {
        if o.source_id != 39 {
            return true;
        }
        seen += 1;
        seen <= 3
    });
    desk.config.primary_fraction = 0.5;
    let mut state = desk.truth_state();
    for s in state.sources[20..].iter_mut() {
        *s = s.apply_update(&[50.0 * MAS, 30.0 * MAS, 5.0 * MAS, 1.0 * MAS, -1.0 * MAS]);
    }
    let mut exec = desk.executor(7);
    let (primary_pass, _) = outer_iteration(&state, &mut exec, &desk.config, &desk.law).unwrap();

    let ids: Vec<u64> = (15..40).collect();
    let sec = secondary_solve(&state, &ids, &mut exec, &desk.law, desk.config.tol_update).unwrap();
    assert_eq!(sec.results.len(), 25);
    assert_eq!(sec.underdetermined, vec![39]);
    for r in &sec.results[..5] {
        let d = r
            .params
            .difference(&primary_pass.sources[r.source_id as usize]);
        assert!(d.iter().all(|x| x.abs() < 1e-10));
    }
    for r in &sec.results[..24] {
        let d = r
            .params
            .difference(&desk.truth.sources[r.source_id as usize]);
        assert!(d.iter().all(|x| x.abs() < 1e-9), "{} {d:?}", r.source_id);
    }
    sec.apply(&mut state);
    assert!(desk.max_source_error(&state.sources[..39]) < 1e-9);
}

#[test]
fn empirical_errors_match_formal_errors() {
    let desk = Desk::new(200, 1.0, 30.0, 40);
    let config = SolverConfig {
        max_outer: 60,
        ..desk.config
    };
    let mut exec = desk.executor(50);
    let out = run_agis(
        desk.start_state(41),
        &mut exec,
        &config,
        &desk.law,
        &desk.anchors(),
    )
    .unwrap();
    let ids: Vec<u64> = (0..200).collect();
    let sec = secondary_solve(&out.state, &ids, &mut exec, &desk.law, config.tol_update).unwrap();
    assert!(sec.underdetermined.is_empty());
    for k in 0..5 {
        let mut z: Vec<f64> = sec
            .results
            .iter()
            .map(|r| {
                let d = r
                    .params
                    .difference(&desk.truth.sources[r.source_id as usize])[k];
                d.abs() / r.covariance_matrix()[(k, k)].sqrt()
            })
            .collect();
        z.sort_by(f64::total_cmp);
        // median |z| of a unit normal
        let median = z[z.len() / 2] / 0.6745;
        assert!((0.5..=2.0).contains(&median), "parameter {k}: {median}");
    }
}

fn calib_block(diag: &[f64], rhs: &[f64]) -> PartialNormalEquations {
    let mut p = PartialNormalEquations::zeros(BlockKind::Calibration, diag.len());
    p.matrix.copy_from_slice(diag);
    p.rhs.copy_from_slice(rhs);
    p
}

proptest! {
    #[test]
    fn calibration_updates_have_zero_mean(
        rows in prop::collection::vec((1e-3..1e6f64, -1e3..1e3f64), 1..40)
    ) {
        let (diag, rhs): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        let d = calibration_update(&calib_block(&diag, &rhs), false).unwrap();
        let scale = d.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
        prop_assert!(d.iter().sum::<f64>().abs() <= 1e-13 * scale * d.len() as f64);
    }
}
