//! Report bundle emission: per-iteration summary, labeled variance traces,
//! and the machine-readable acceptance sheet. A pure function of the run
//! directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::{CurriculumState, CurriculumStatus, GateRecord};
use crate::gate::threshold_gaussian;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("missing run artifacts: {0:?}")]
    MissingArtifacts(Vec<String>),
    #[error("artifact parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionStatus {
    /// Verified from this run's artifacts.
    Pass,
    Fail,
    /// Verified by the `acceptance` test target, not derivable from one run.
    Suite,
    NotEvaluated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionEntry {
    pub id: u32,
    pub slug: String,
    pub description: String,
    pub status: CriterionStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// The quality gates this artifact is accepted against, by id. Statuses that
/// cannot be derived from a single run directory point at the acceptance
/// test target.
pub fn criteria_registry() -> Vec<CriterionEntry> {
    let entry = |id: u32, slug: &str, description: &str| CriterionEntry {
        id,
        slug: slug.to_string(),
        description: description.to_string(),
        status: CriterionStatus::Suite,
        detail: None,
    };
    vec![
        entry(
            1,
            "variance-decomposition-identity",
            "ensemble variance decomposition identity holds within 1e-9 on random ensembles",
        ),
        entry(
            2,
            "gradient-correctness",
            "critic, diversity, and actor gradients match central finite differences within 1e-4 relative",
        ),
        entry(
            3,
            "backbone-reduction",
            "training with the diversity coefficient pinned to zero is bit-identical to the plain backbone",
        ),
        entry(
            4,
            "ood-separation",
            "episode variances on shifted-dynamics rollouts exceed the 95th-percentile ID threshold, fresh ID rollouts stay below",
        ),
        entry(
            5,
            "gatekeeper-trend",
            "per-iteration target-proxy variance is non-increasing while the reporting-only target return is non-decreasing, with strong negative correlation",
        ),
        entry(
            6,
            "gate-end-to-end",
            "in-range target proxies deploy at iteration 0; far-out proxies exhaust the randomization budget",
        ),
        entry(
            7,
            "tabular-certificates",
            "gap lower bound, operator perturbation bound, value error upper bound, and bias reduction hold with zero counterexamples",
        ),
        entry(
            8,
            "weighted-fitted-q",
            "uncertainty-weighted fitted-Q suboptimality never exceeds the uniform variant's on the bundled scenario",
        ),
        entry(
            9,
            "balanced-buffer-statistics",
            "chi-square test between empirical sampling frequencies and the weight distribution passes at p > 0.01",
        ),
        entry(
            10,
            "target-data-firewall",
            "the target proxy is read only by gate evaluation and reporting; zero training-path reads",
        ),
        entry(
            11,
            "gaussian-threshold-formula",
            "gaussian gate threshold matches the normal-quantile formula and decreases monotonically in the ensemble size",
        ),
    ]
}

#[derive(Debug, Serialize)]
pub struct ReportBundle {
    pub state: CurriculumState,
    pub acceptance: Vec<CriterionEntry>,
    pub files: Vec<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ReportError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| ReportError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Builds the report bundle from a finished run directory, writing the
/// labeled variance traces and the acceptance sheet next to the existing
/// artifacts.
pub fn report(run_dir: &Path) -> Result<ReportBundle, ReportError> {
    let state_path = run_dir.join("reports/curriculum_state.json");
    let summary_path = run_dir.join("reports/summary.csv");
    let mut missing = Vec::new();
    for p in [&state_path, &summary_path] {
        if !p.exists() {
            missing.push(p.display().to_string());
        }
    }
    if !missing.is_empty() {
        return Err(ReportError::MissingArtifacts(missing));
    }
    let state: CurriculumState = read_json(&state_path)?;

    // labeled variance traces from the per-iteration gate records
    let traces_path = run_dir.join("reports/variance_traces.csv");
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&traces_path)?);
        writeln!(w, "iteration,label,episode,t,sigma2")?;
        for row in &state.rows {
            let record: GateRecord =
                read_json(&run_dir.join(format!("reports/gate_{}.json", row.iteration)))?;
            for (ep, trace) in record.report.episode_traces.iter().enumerate() {
                for (t, sigma2) in trace.iter().enumerate() {
                    writeln!(w, "{},target_proxy,{},{},{}", row.iteration, ep, t, sigma2)?;
                }
            }
            for (ep, sigma2) in record.id_variances.iter().enumerate() {
                writeln!(w, "{},nominal_id,{},,{}", row.iteration, ep, sigma2)?;
            }
        }
        w.flush()?;
    }

    let mut acceptance = criteria_registry();
    for entry in acceptance.iter_mut() {
        match entry.id {
            5 => {
                if state.rows.len() >= 2 {
                    let sigmas: Vec<f64> = state.rows.iter().map(|r| r.sigma2_mean).collect();
                    let non_increasing = sigmas.windows(2).all(|w| w[1] <= w[0] + 1e-12);
                    let returns: Option<Vec<f64>> = state
                        .rows
                        .iter()
                        .map(|r| r.eval_return_at_target)
                        .collect();
                    match returns {
                        Some(rets) => {
                            let non_decreasing = rets.windows(2).all(|w| w[1] >= w[0] - 1e-12);
                            let corr = pearson(&sigmas, &rets);
                            let pass = non_increasing && non_decreasing && corr <= -0.5;
                            entry.status = if pass {
                                CriterionStatus::Pass
                            } else {
                                CriterionStatus::Fail
                            };
                            entry.detail = Some(format!(
                                "sigma2 non-increasing: {non_increasing}, return non-decreasing: {non_decreasing}, correlation {corr:.3}"
                            ));
                        }
                        None => {
                            entry.status = CriterionStatus::NotEvaluated;
                            entry.detail =
                                Some("run recorded no reporting-only target returns".to_string());
                        }
                    }
                } else {
                    entry.status = CriterionStatus::NotEvaluated;
                    entry.detail = Some("fewer than 2 iterations in this run".to_string());
                }
            }
            10 => {
                let pass = state.audit.training_reads == 0 && state.audit.gate_reads > 0;
                entry.status = if pass {
                    CriterionStatus::Pass
                } else {
                    CriterionStatus::Fail
                };
                entry.detail = Some(format!(
                    "gate reads {}, report reads {}, training reads {}",
                    state.audit.gate_reads, state.audit.report_reads, state.audit.training_reads
                ));
            }
            11 => {
                // pure formula check, evaluated in place
                let tau = threshold_gaussian(1.0, 4, 0.05);
                let formula_ok = (tau - 1.8224).abs() < 1e-3;
                let mut monotone = true;
                let mut prev = f64::INFINITY;
                for n in 2..=64 {
                    let t = threshold_gaussian(1.0, n, 0.05);
                    monotone &= t < prev;
                    prev = t;
                }
                entry.status = if formula_ok && monotone {
                    CriterionStatus::Pass
                } else {
                    CriterionStatus::Fail
                };
                entry.detail = Some(format!("tau(1, 4, 0.05) = {tau:.5}"));
            }
            6 => {
                entry.detail = Some(format!(
                    "this run ended with status {:?}",
                    state.status
                ));
            }
            _ => {}
        }
    }

    let sheet_path = run_dir.join("reports/acceptance_sheet.json");
    fs::write(
        &sheet_path,
        serde_json::to_string_pretty(&acceptance).expect("sheet serializes"),
    )?;

    Ok(ReportBundle {
        state,
        acceptance,
        files: vec![summary_path, traces_path, sheet_path],
    })
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// True when the curriculum completed one way or the other.
pub fn run_finished(state: &CurriculumState) -> bool {
    state.status != CurriculumStatus::Running
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_covers_all_ids() {
        let reg = criteria_registry();
        assert_eq!(reg.len(), 11);
        for (i, entry) in reg.iter().enumerate() {
            assert_eq!(entry.id as usize, i + 1);
            assert!(!entry.slug.is_empty());
        }
    }

    #[test]
    fn pearson_basics() {
        let xs = [1.0, 2.0, 3.0];
        assert!((pearson(&xs, &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&xs, &[5.0, 5.0, 5.0]), 0.0);
    }

    #[test]
    fn report_on_missing_dir_lists_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        match report(dir.path()) {
            Err(ReportError::MissingArtifacts(names)) => assert_eq!(names.len(), 2),
            other => panic!("expected missing artifacts, got {other:?}"),
        }
    }
}
