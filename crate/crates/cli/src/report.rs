//! `agis report` and `agis status`: line-delimited JSON records derived only
//! from the artifacts in a run directory.

use std::collections::BTreeMap;
use std::io::Write;

use agis_core::io::read_snapshot;
use agis_core::model::SourceId;
use agis_core::units::MAS;
use agis_core::whiteboard::{FileJobStore, JobKind, JobState, JobStore, SystemClock};
use serde::Serialize;

use crate::checkpoint::read_checkpoint;
use crate::orchestrate::{SolveSummary, FORMAL_ERRORS_HEADER};
use crate::{CliError, Manifest, RunDir};

/// Median |z| of a standard normal variable.
pub const NORMAL_MEDIAN_ABS: f64 = 0.674_489_750_196_081_7;

pub const PARAMETERS: [&str; 5] = [
    "alpha_star",
    "delta",
    "parallax",
    "pm_alpha_star",
    "pm_delta",
];
const UNITS: [&str; 5] = ["mas", "mas", "mas", "mas/yr", "mas/yr"];

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportLine {
    Summary {
        n_sources: usize,
        n_primary: usize,
        n_observations: u64,
        mean_obs_per_source: f64,
        outer_iterations: usize,
        converged: bool,
        termination: String,
        final_rms_residual_rad: f64,
        final_chi2: f64,
    },
    /// Errors against the truth for one parameter over one group of sources.
    Accuracy {
        group: String,
        parameter: String,
        unit: String,
        n: usize,
        rms_error: f64,
        rms_error_rad: f64,
        max_abs_error_rad: f64,
        median_abs_error: f64,
        median_formal_error: f64,
        /// median(|error| / formal) / 0.6745: 1 when the formal errors
        /// describe the actual errors.
        error_to_formal_ratio: f64,
    },
    /// Secondary against primary RMS error, the primary sources reweighted
    /// to the secondary distribution of observation counts.
    TwoPhase {
        parameter: String,
        n_secondary: usize,
        n_primary: usize,
        rms_ratio: f64,
    },
    Iteration {
        iteration: u32,
        chi2: f64,
        chi2_before_source: f64,
        rms_residual_rad: f64,
        max_source_update_rad: f64,
        max_attitude_update_rad: f64,
        max_calibration_update_rad: f64,
        global_update: f64,
        n_obs: u64,
        workers: usize,
        wall_time_s: f64,
        obs_per_worker_hour: f64,
    },
    Throughput {
        outer_iterations: usize,
        workers: usize,
        n_obs: u64,
        wall_time_s: f64,
        obs_per_worker_hour: f64,
    },
}

/// One row of `formal_errors.csv`, in rad-equivalents.
#[derive(Debug, Clone, PartialEq)]
pub struct FormalRow {
    pub source_id: SourceId,
    pub updated: bool,
    pub n_obs: u32,
    pub sigma: [f64; 5],
}

pub fn read_formal_errors(path: &std::path::Path) -> Result<Vec<FormalRow>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize| CliError::Storage(format!("{}: line {line}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(FORMAL_ERRORS_HEADER) {
        return Err(bad(1));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(i + 2));
        }
        let mut sigma = [0.0; 5];
        for (s, v) in sigma.iter_mut().zip(&f[3..]) {
            *s = v.parse::<f64>().map_err(|_| bad(i + 2))? * MAS;
        }
        rows.push(FormalRow {
            source_id: f[0].parse().map_err(|_| bad(i + 2))?,
            updated: f[1] == "updated",
            n_obs: f[2].parse().map_err(|_| bad(i + 2))?,
            sigma,
        });
    }
    Ok(rows)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        (s / n as f64).sqrt()
    }
}

struct SourceError {
    primary: bool,
    n_obs: u32,
    error: [f64; 5],
    sigma: [f64; 5],
}

fn accuracy_lines(group: &str, errs: &[&SourceError]) -> Vec<ReportLine> {
    (0..5)
        .map(|k| {
            let e: Vec<f64> = errs.iter().map(|s| s.error[k]).collect();
            let ratio = median(
                errs.iter()
                    .filter(|s| s.sigma[k] > 0.0)
                    .map(|s| (s.error[k] / s.sigma[k]).abs())
                    .collect(),
            );
            ReportLine::Accuracy {
                group: group.to_string(),
                parameter: PARAMETERS[k].to_string(),
                unit: UNITS[k].to_string(),
                n: errs.len(),
                rms_error: rms(e.iter().copied()) / MAS,
                rms_error_rad: rms(e.iter().copied()),
                max_abs_error_rad: e.iter().fold(0.0, |m: f64, x| m.max(x.abs())),
                median_abs_error: median(e.iter().map(|x| x.abs()).collect()) / MAS,
                median_formal_error: median(errs.iter().map(|s| s.sigma[k]).collect()) / MAS,
                error_to_formal_ratio: ratio / NORMAL_MEDIAN_ABS,
            }
        })
        .collect()
}

fn two_phase_lines(errs: &[SourceError]) -> Vec<ReportLine> {
    // per observation count: (Σe² and n) for secondary and primary
    let mut groups: BTreeMap<u32, ([f64; 5], usize, [f64; 5], usize)> = BTreeMap::new();
    for s in errs {
        let g = groups.entry(s.n_obs).or_default();
        let (sum, n) = if s.primary {
            (&mut g.2, &mut g.3)
        } else {
            (&mut g.0, &mut g.1)
        };
        for (a, e) in sum.iter_mut().zip(s.error) {
            *a += e * e;
        }
        *n += 1;
    }
    let matched: Vec<_> = groups.values().filter(|g| g.1 > 0 && g.3 > 0).collect();
    let n_secondary = matched.iter().map(|g| g.1).sum();
    let n_primary = matched.iter().map(|g| g.3).sum();
    if n_secondary == 0 {
        return Vec::new();
    }
    (0..5)
        .map(|k| {
            let sec: f64 = matched.iter().map(|g| g.0[k]).sum();
            let pri: f64 = matched
                .iter()
                .map(|g| g.1 as f64 * g.2[k] / g.3 as f64)
                .sum();
            ReportLine::TwoPhase {
                parameter: PARAMETERS[k].to_string(),
                n_secondary,
                n_primary,
                rms_ratio: (sec / pri).sqrt(),
            }
        })
        .collect()
}

fn per_worker_hour(n_obs: u64, workers: usize, wall_s: f64) -> f64 {
    if wall_s > 0.0 && workers > 0 {
        n_obs as f64 * 3600.0 / (workers as f64 * wall_s)
    } else {
        0.0
    }
}

/// Every report record of a completed run.
pub fn build_report(run: &RunDir) -> Result<Vec<ReportLine>, CliError> {
    let manifest = Manifest::load(run)?;
    let truth = read_snapshot(&run.require(run.truth_state())?)?;
    let solved = read_snapshot(&run.require(run.final_state())?)?;
    let formal = read_formal_errors(&run.require(run.formal_errors())?)?;
    let summary: SolveSummary = {
        let path = run.require(run.solve_report())?;
        serde_json::from_str(&std::fs::read_to_string(&path)?)
            .map_err(|e| CliError::Storage(format!("{}: {e}", path.display())))?
    };
    if solved.state.sources.len() != truth.state.sources.len() {
        return Err(CliError::Storage(
            "final and truth catalogs differ in size".into(),
        ));
    }
    let n_primary = solved.state.n_primary as SourceId;
    let errors: Vec<SourceError> = formal
        .iter()
        .filter(|r| r.updated)
        .map(|r| {
            let id = r.source_id as usize;
            SourceError {
                primary: r.source_id < n_primary,
                n_obs: r.n_obs,
                error: solved.state.sources[id].difference(&truth.state.sources[id]),
                sigma: r.sigma,
            }
        })
        .collect();

    let records = &summary.convergence.records;
    let last = records.last();
    let mut out = vec![ReportLine::Summary {
        n_sources: manifest.config.n_sources,
        n_primary: n_primary as usize,
        n_observations: manifest.n_observations,
        mean_obs_per_source: manifest.mean_obs_per_source,
        outer_iterations: records.len(),
        converged: summary.converged,
        termination: summary.reason.clone(),
        final_rms_residual_rad: last.map_or(f64::NAN, |r| r.rms_residual),
        final_chi2: last.map_or(f64::NAN, |r| r.chi2),
    }];
    let primary: Vec<&SourceError> = errors.iter().filter(|s| s.primary).collect();
    let secondary: Vec<&SourceError> = errors.iter().filter(|s| !s.primary).collect();
    let all: Vec<&SourceError> = errors.iter().collect();
    for (group, errs) in [("primary", primary), ("secondary", secondary), ("all", all)] {
        if !errs.is_empty() {
            out.extend(accuracy_lines(group, &errs));
        }
    }
    out.extend(two_phase_lines(&errors));
    for r in records {
        out.push(ReportLine::Iteration {
            iteration: r.iteration,
            chi2: r.chi2,
            chi2_before_source: r.chi2_before_source,
            rms_residual_rad: r.rms_residual,
            max_source_update_rad: r.max_source_update,
            max_attitude_update_rad: r.max_attitude_update,
            max_calibration_update_rad: r.max_calibration_update,
            global_update: r.global_update,
            n_obs: r.n_obs,
            workers: r.workers,
            wall_time_s: r.wall_time_s,
            obs_per_worker_hour: per_worker_hour(r.n_obs, r.workers, r.wall_time_s),
        });
    }
    let n_obs: u64 = records.iter().map(|r| r.n_obs).sum();
    let wall: f64 = records.iter().map(|r| r.wall_time_s).sum();
    out.push(ReportLine::Throughput {
        outer_iterations: records.len(),
        workers: summary.workers,
        n_obs,
        wall_time_s: wall,
        obs_per_worker_hour: per_worker_hour(n_obs, summary.workers, wall),
    });
    Ok(out)
}

pub fn cmd_report(run: &RunDir, out: &mut dyn Write) -> Result<(), CliError> {
    for line in build_report(run)? {
        writeln!(
            out,
            "{}",
            serde_json::to_string(&line).expect("report line")
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum StatusLine {
    Run {
        simulated: bool,
        iterations_checkpointed: Option<usize>,
        solved: bool,
    },
    Jobs {
        iteration: u32,
        kind: JobKind,
        pending: usize,
        claimed: usize,
        done: usize,
        failed: usize,
    },
}

/// Progress of a run: checkpointed iterations and the job table by
/// iteration.
pub fn cmd_status(run: &RunDir, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = Manifest::load(run)?;
    let checkpoint = read_checkpoint(&run.checkpoint(), &manifest.config.result_digest())?;
    let mut lines = vec![StatusLine::Run {
        simulated: true,
        iterations_checkpointed: checkpoint.map(|p| p.records.len()),
        solved: run.solve_report().exists(),
    }];
    let store = FileJobStore::open(&run.whiteboard(), Box::new(SystemClock))?;
    let mut table: BTreeMap<(u32, u8), (JobKind, [usize; 4])> = BTreeMap::new();
    for j in store.jobs()? {
        let key = (j.iteration, j.kind as u8);
        let e = table.entry(key).or_insert((j.kind, [0; 4]));
        let slot = match j.state {
            JobState::Pending => 0,
            JobState::Claimed => 1,
            JobState::Done => 2,
            JobState::Failed => 3,
        };
        e.1[slot] += 1;
    }
    for ((iteration, _), (kind, c)) in table {
        lines.push(StatusLine::Jobs {
            iteration,
            kind,
            pending: c[0],
            claimed: c[1],
            done: c[2],
            failed: c[3],
        });
    }
    for line in lines {
        writeln!(
            out,
            "{}",
            serde_json::to_string(&line).expect("status line")
        )?;
    }
    Ok(())
}
