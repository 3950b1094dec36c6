use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agis_cli::report::{build_report, ReportLine};
use agis_cli::{
    cmd_simulate, cmd_solve, CliError, CrashInjection, RunConfig, RunDir, SolveOptions,
};
use agis_core::io::read_snapshot;
use agis_core::solver::SolverConfig;
use agis_core::SolveError;
use agis_core::StoreError;
use tempfile::TempDir;

const AGIS: &str = env!("CARGO_BIN_EXE_agis");

fn agis(args: &[&str]) -> Output {
    Command::new(AGIS).args(args).output().expect("run agis")
}

/// A few hundred sources with coarse attitude knots: well determined and
/// quick to solve.
fn small(n_sources: usize, sigma_mas: f64) -> RunConfig {
    RunConfig {
        n_sources,
        noise_sigma_mas: sigma_mas,
        batch_size: 40,
        lease_ms: 400,
        heartbeat_ms: 100,
        solver: SolverConfig {
            attitude_knot_spacing: 2.0,
            ..SolverConfig::default()
        },
        seed: 17,
        ..RunConfig::default()
    }
}

fn simulated(config: &RunConfig) -> (TempDir, RunDir) {
    let tmp = TempDir::new().unwrap();
    let run = RunDir::new(&tmp.path().join("run"));
    cmd_simulate(config, &run).unwrap();
    (tmp, run)
}

fn opts(workers: usize) -> SolveOptions {
    SolveOptions {
        workers: Some(workers),
        ..SolveOptions::new(Path::new(AGIS))
    }
}

/// Every file under `dir` with its contents.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn final_bytes(run: &RunDir) -> (Vec<u8>, Vec<u8>) {
    (
        std::fs::read(run.final_catalog()).unwrap(),
        std::fs::read(run.final_state()).unwrap(),
    )
}

#[test]
fn default_scan_law_multiplicity() {
    let config = RunConfig {
        n_sources: 1000,
        ..RunConfig::default()
    };
    let (_tmp, run) = simulated(&config);
    let text = std::fs::read_to_string(run.manifest()).unwrap();
    let m: agis_cli::Manifest = serde_json::from_str(&text).unwrap();
    assert!(
        (60.0..=100.0).contains(&m.mean_obs_per_source),
        "{}",
        m.mean_obs_per_source
    );
    assert_eq!(m.config, config);
    assert_eq!(m.seeds, config.seeds());
}

#[test]
fn simulate_is_reproducible_and_validated() {
    let config = small(60, 1.0);
    let (_a, run_a) = simulated(&config);
    let (_b, run_b) = simulated(&config);
    let (mut ta, mut tb) = (tree(&run_a.root), tree(&run_b.root));
    // the only path-dependent file
    let inputs = Path::new("whiteboard/inputs.json").to_path_buf();
    assert!(ta.remove(&inputs).is_some() && tb.remove(&inputs).is_some());
    assert_eq!(ta, tb);

    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"n_sources": 0}"#).unwrap();
    let dir = tmp.path().join("r");
    let out = agis(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--run-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("catalog size"));

    // a second simulation never overwrites a run
    assert!(matches!(
        cmd_simulate(&config, &run_a),
        Err(CliError::Validation(_))
    ));
}

#[test]
fn seed_flag_changes_the_catalog() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"n_sources": 20}"#).unwrap();
    let mut catalogs = Vec::new();
    for (name, seed) in [("a", "3"), ("b", "4")] {
        let dir = tmp.path().join(name);
        let out = agis(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--run-dir",
            dir.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert!(out.status.success());
        let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(line["n_sources"], 20);
        catalogs.push(std::fs::read(dir.join("truth.csv")).unwrap());
    }
    assert_ne!(catalogs[0], catalogs[1]);
}

#[test]
fn worker_without_jobs_and_without_store() {
    let (_tmp, run) = simulated(&small(10, 0.0));
    let root = run.root.to_str().unwrap();
    let out = agis(&["worker", "--run-dir", root, "--worker-id", "idle"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stats: serde_json::Value =
        serde_json::from_slice(out.stdout.split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert_eq!(stats["jobs"], 0);
    assert!(run.whiteboard().join("stats/idle.jsonl").exists());

    let out = agis(&["worker", "--run-dir", "/nonexistent/run"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn zero_noise_run_recovers_the_truth() {
    let (_tmp, run) = simulated(&small(300, 0.0));
    let summary = cmd_solve(&run, &opts(2)).unwrap();
    assert!(summary.converged, "{}", summary.reason);
    let records = &summary.convergence.records;
    assert!(records.last().unwrap().rms_residual < 1e-10);
    assert_eq!(summary.secondary_updated, 150);

    let lines = build_report(&run).unwrap();
    let mut accuracy = 0;
    let mut iterations = 0;
    for line in &lines {
        match line {
            ReportLine::Accuracy {
                max_abs_error_rad,
                group,
                parameter,
                ..
            } => {
                accuracy += 1;
                assert!(
                    *max_abs_error_rad < 1e-9,
                    "{group} {parameter}: {max_abs_error_rad:e}"
                );
            }
            ReportLine::Iteration { workers, .. } => {
                iterations += 1;
                assert_eq!(*workers, 2);
            }
            _ => {}
        }
    }
    assert_eq!(accuracy, 15);
    assert_eq!(iterations, records.len());
}

#[test]
fn report_is_side_effect_free() {
    let (_tmp, run) = simulated(&small(80, 1.0));
    let root = run.root.to_str().unwrap();
    let out = agis(&["report", "--run-dir", root]);
    assert_eq!(out.status.code(), Some(4), "report before solve");

    let out = agis(&["solve", "--run-dir", root]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let before = tree(&run.root);
    let a = agis(&["report", "--run-dir", root]);
    let b = agis(&["report", "--run-dir", root]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(before, tree(&run.root));
    for line in String::from_utf8(a.stdout).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["record"].is_string());
    }
}

#[test]
fn noisy_parallax_errors_match_the_formal_errors() {
    let (_tmp, run) = simulated(&small(400, 1.0));
    cmd_solve(&run, &opts(1)).unwrap();
    let lines = build_report(&run).unwrap();
    let (rms, formal) = lines
        .iter()
        .find_map(|l| match l {
            ReportLine::Accuracy {
                group,
                parameter,
                rms_error,
                median_formal_error,
                ..
            } if group == "all" && parameter == "parallax" => {
                Some((*rms_error, *median_formal_error))
            }
            _ => None,
        })
        .unwrap();
    assert!(
        (0.5..=2.0).contains(&(rms / formal)),
        "rms {rms} mas, formal {formal} mas"
    );
}

#[test]
fn catalogs_do_not_depend_on_workers_or_interruption() {
    let config = small(200, 1.0);
    let (_t1, one) = simulated(&config);
    cmd_solve(&one, &opts(1)).unwrap();
    let reference = final_bytes(&one);

    let (_t4, four) = simulated(&config);
    cmd_solve(&four, &opts(4)).unwrap();
    assert_eq!(final_bytes(&four), reference);

    let (_t2, halted) = simulated(&config);
    let root = halted.root.to_str().unwrap();
    let out = agis(&["solve", "--run-dir", root, "--halt-after", "3"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(!halted.final_catalog().exists());
    let status = agis(&["status", "--run-dir", root]);
    let first: serde_json::Value =
        serde_json::from_slice(status.stdout.split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert_eq!(first["iterations_checkpointed"], 3);
    let resumed = cmd_solve(&halted, &opts(3)).unwrap();
    assert_eq!(resumed.resumed_iterations, 3);
    assert_eq!(final_bytes(&halted), reference);
    // solving a finished run again changes nothing
    let again = cmd_solve(&halted, &opts(2)).unwrap();
    assert_eq!(
        again.convergence.records.len(),
        resumed.convergence.records.len()
    );
    assert_eq!(final_bytes(&halted), reference);
}

#[test]
fn crashed_worker_is_recovered_by_lease_expiry() {
    let config = small(160, 1.0);
    let (_t1, clean) = simulated(&config);
    cmd_solve(&clean, &opts(1)).unwrap();

    let mut crashing = config.clone();
    crashing.faults.crash = Some(CrashInjection {
        iteration: 1,
        after_claims: 1,
    });
    let (_t2, crashed) = simulated(&crashing);
    cmd_solve(&crashed, &opts(2)).unwrap();
    assert_eq!(final_bytes(&crashed), final_bytes(&clean));
    let log = std::fs::read_to_string(crashed.whiteboard().join("jobs.log")).unwrap();
    assert!(log.contains("\"attempts\":1"), "no job was requeued");
}

#[test]
fn nan_observation_stops_the_solve_before_merging() {
    let mut config = small(50, 1.0);
    config.faults.nan_observation = Some(1234);
    let (_tmp, run) = simulated(&config);
    let err = cmd_solve(&run, &opts(1)).unwrap_err();
    match &err {
        CliError::Solve(SolveError::Store(StoreError::FiniteCheckFailed { location, .. })) => {
            assert!(location.contains("observation"), "{location}");
        }
        other => panic!("{other}"),
    }
    assert_eq!(err.exit_code(), 4);
    assert!(!run.checkpoint().exists());

    let out = agis(&["solve", "--run-dir", run.root.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("finite check failed for job"));
}

#[test]
fn unconverged_run_keeps_its_outputs() {
    let mut config = small(60, 1.0);
    config.solver.max_outer = 2;
    let (_tmp, run) = simulated(&config);
    let out = agis(&["solve", "--run-dir", run.root.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(run.final_catalog().exists() && run.solve_report().exists());
    let state = read_snapshot(&run.final_state()).unwrap().state;
    assert_eq!(state.sources.len(), 60);
    assert!(build_report(&run).is_ok());
}

#[test]
fn tampered_inputs_are_refused() {
    let (_tmp, run) = simulated(&small(30, 0.0));
    let path = run.truth_catalog();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push('\n');
    std::fs::write(&path, text).unwrap();
    let out = agis(&["solve", "--run-dir", run.root.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("truth.csv"));
}
