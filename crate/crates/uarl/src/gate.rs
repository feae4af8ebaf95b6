//! Variance-based OOD detection and the deployment decision on the
//! target-proxy dataset: deploy iff the mean critic variance over the proxy
//! stays at or below a threshold calibrated on in-distribution rollouts.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::Dataset;
use crate::ensemble::{mean_var, predict, CriticEnsemble, EnsembleError};

#[derive(Debug, Error)]
pub enum GateError {
    #[error("need at least {min} in-distribution variance samples, got {got}")]
    TooFewIdSamples { min: usize, got: usize },
    #[error("target-proxy dataset is empty")]
    EmptyTarget,
    #[error("need at least {min} parameter samples for coverage estimation, got {got}")]
    TooFewPhiSamples { min: usize, got: usize },
    #[error("invalid gate config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Percentile,
    Gaussian,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    /// Percentile of the ID variance samples used as the threshold. The
    /// default 95 is the upper envelope; the literal lower-tail reading
    /// remains selectable by configuring a small percentile.
    pub percentile: f64,
    /// False-alarm rate for the Gaussian threshold rule.
    pub alpha: f64,
    pub mode: GateMode,
    /// KL budget for the parameter-coverage check.
    pub tau_kl: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            percentile: 95.0,
            alpha: 0.05,
            mode: GateMode::Percentile,
            tau_kl: 0.25,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), GateError> {
        if !(0.0 < self.percentile && self.percentile < 100.0) {
            return Err(GateError::InvalidConfig(
                "percentile must be in (0, 100)".into(),
            ));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(GateError::InvalidConfig("alpha must be in (0, 1)".into()));
        }
        if self.tau_kl < 0.0 {
            return Err(GateError::InvalidConfig("tau_kl must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Deploy,
    Continue,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateReport {
    pub sigma2_mean: f64,
    pub tau: f64,
    pub decision: GateDecision,
    /// Per-episode variance traces over the target proxy, for diagnostics.
    pub episode_traces: Vec<Vec<f64>>,
}

/// Critic variance sigma^2 at every transition of the dataset, flattened in
/// episode order.
pub fn variance_trace(
    ensemble: &CriticEnsemble,
    dataset: &Dataset,
) -> Result<Vec<f64>, GateError> {
    let mut out = Vec::with_capacity(dataset.n_transitions());
    for t in dataset.transitions() {
        let preds = predict(ensemble, &t.state, &t.action)?;
        out.push(mean_var(&preds).sigma2);
    }
    Ok(out)
}

/// Variance traces grouped per episode.
pub fn episode_variance_traces(
    ensemble: &CriticEnsemble,
    dataset: &Dataset,
) -> Result<Vec<Vec<f64>>, GateError> {
    dataset
        .episodes
        .iter()
        .map(|ep| {
            ep.iter()
                .map(|t| {
                    let preds = predict(ensemble, &t.state, &t.action)?;
                    Ok(mean_var(&preds).sigma2)
                })
                .collect()
        })
        .collect()
}

/// Mean variance per episode; the per-rollout statistic that thresholds are
/// calibrated on.
pub fn episode_mean_variances(
    ensemble: &CriticEnsemble,
    dataset: &Dataset,
) -> Result<Vec<f64>, GateError> {
    Ok(episode_variance_traces(ensemble, dataset)?
        .iter()
        .map(|tr| tr.iter().sum::<f64>() / tr.len() as f64)
        .collect())
}

pub const MIN_ID_SAMPLES: usize = 20;

/// Linear-interpolated order statistic of the ID variance samples.
pub fn threshold_percentile(id_variances: &[f64], percentile: f64) -> Result<f64, GateError> {
    if id_variances.len() < MIN_ID_SAMPLES {
        return Err(GateError::TooFewIdSamples {
            min: MIN_ID_SAMPLES,
            got: id_variances.len(),
        });
    }
    let mut sorted = id_variances.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let rank = (n - 1) as f64 * percentile / 100.0;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Gaussian rule: tau = sigma_in^2 + z_{1-alpha} sigma_in / sqrt(N), which
/// keeps the ID false-alarm rate at alpha under a normal model of the
/// variance statistic.
pub fn threshold_gaussian(sigma_in2: f64, n_ensemble: usize, alpha: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let z = normal.inverse_cdf(1.0 - alpha);
    sigma_in2 + z * sigma_in2.sqrt() / (n_ensemble as f64).sqrt()
}

/// The deployment rule on the target proxy: deploy iff the mean variance over
/// every transition of the proxy is at or below tau.
pub fn gate_decision(
    ensemble: &CriticEnsemble,
    target_proxy: &Dataset,
    config: &GateConfig,
    id_variances: &[f64],
) -> Result<GateReport, GateError> {
    config.validate()?;
    if target_proxy.n_transitions() == 0 {
        return Err(GateError::EmptyTarget);
    }
    let episode_traces = episode_variance_traces(ensemble, target_proxy)?;
    let all: Vec<f64> = episode_traces.iter().flatten().copied().collect();
    let sigma2_mean = all.iter().sum::<f64>() / all.len() as f64;
    let tau = match config.mode {
        GateMode::Percentile => threshold_percentile(id_variances, config.percentile)?,
        GateMode::Gaussian => {
            let sigma_in2 = id_variances.iter().sum::<f64>() / id_variances.len().max(1) as f64;
            threshold_gaussian(sigma_in2, ensemble.size(), config.alpha)
        }
    };
    let decision = if sigma2_mean <= tau {
        GateDecision::Deploy
    } else {
        GateDecision::Continue
    };
    Ok(GateReport {
        sigma2_mean,
        tau,
        decision,
        episode_traces,
    })
}

pub const KL_BINS: usize = 16;
pub const MIN_PHI_SAMPLES: usize = 50;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KlCoverage {
    pub kl: f64,
    pub in_coverage: bool,
    /// Samples outside the range, folded into the boundary bins.
    pub outside: usize,
}

/// Histogram KL divergence of the empirical parameter density against the
/// intended uniform density over `range`, with membership decided by tau_kl.
pub fn kl_coverage(
    phi_samples: &[f64],
    range: [f64; 2],
    tau_kl: f64,
) -> Result<KlCoverage, GateError> {
    if phi_samples.len() < MIN_PHI_SAMPLES {
        return Err(GateError::TooFewPhiSamples {
            min: MIN_PHI_SAMPLES,
            got: phi_samples.len(),
        });
    }
    let [lo, hi] = range;
    let width = hi - lo;
    let mut counts = [0usize; KL_BINS];
    let mut outside = 0usize;
    for &phi in phi_samples {
        let bin = if width <= f64::EPSILON {
            0
        } else {
            let u = (phi - lo) / width;
            if !(0.0..=1.0).contains(&u) {
                outside += 1;
            }
            ((u * KL_BINS as f64).floor() as isize).clamp(0, KL_BINS as i64 as isize - 1) as usize
        };
        counts[bin] += 1;
    }
    if outside > 0 {
        eprintln!("kl_coverage: {outside} samples outside [{lo}, {hi}] counted in boundary bins");
    }
    let n = phi_samples.len() as f64;
    let uniform = 1.0 / KL_BINS as f64;
    let kl: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * (p / uniform).ln()
        })
        .sum();
    Ok(KlCoverage {
        kl,
        in_coverage: kl <= tau_kl,
        outside,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect_rollouts, PdPointMassPolicy, Role};
    use crate::ensemble::init_ensemble;
    use crate::envs::{DomainParams, EnvSpec, ParamKind, ParamRange};
    use rand::Rng;

    fn tiny_dataset(n_episodes: usize) -> Dataset {
        let spec = EnvSpec::point_mass(5, DomainParams::new(0.05, 0.0, 1.0));
        let range =
            ParamRange::around(&spec.nominal_params, ParamKind::MassMult, [1.0, 1.0]).unwrap();
        collect_rollouts(
            &spec,
            &range,
            &PdPointMassPolicy::default(),
            n_episodes,
            3,
            Role::TargetProxy,
        )
        .unwrap()
    }

    #[test]
    fn identical_critics_give_zero_trace_and_deploy() {
        // two members so the mean is exact in IEEE arithmetic
        let mut ensemble = init_ensemble(2, 4, 2, 0).unwrap();
        let shared = ensemble.members[0].online.clone();
        for m in ensemble.members.iter_mut() {
            m.online = shared.clone();
        }
        let data = tiny_dataset(3);
        let trace = variance_trace(&ensemble, &data).unwrap();
        assert_eq!(trace.len(), data.n_transitions());
        assert!(trace.iter().all(|&v| v == 0.0));

        let id = vec![0.01; 30];
        let report = gate_decision(&ensemble, &data, &GateConfig::default(), &id).unwrap();
        assert_eq!(report.decision, GateDecision::Deploy);
    }

    #[test]
    fn variance_trace_matches_hand_computation() {
        let ensemble = init_ensemble(2, 4, 2, 1).unwrap();
        let data = tiny_dataset(1);
        let t = data.transitions().next().unwrap();
        let preds = predict(&ensemble, &t.state, &t.action).unwrap();
        let mu = (preds[0] + preds[1]) / 2.0;
        let expected = ((preds[0] - mu).powi(2) + (preds[1] - mu).powi(2)) / 2.0;
        let trace = variance_trace(&ensemble, &data).unwrap();
        assert!((trace[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn percentile_interpolated_order_statistic() {
        let samples: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let tau = threshold_percentile(&samples, 95.0).unwrap();
        assert!((tau - 95.05).abs() < 1e-12, "tau {tau}");

        let all_equal = vec![2.5; 40];
        assert_eq!(threshold_percentile(&all_equal, 95.0).unwrap(), 2.5);

        // percentile -> 100 approaches the maximum
        let tau = threshold_percentile(&samples, 99.999).unwrap();
        assert!(tau <= 100.0 && tau > 99.99);

        assert!(matches!(
            threshold_percentile(&[1.0; 10], 95.0),
            Err(GateError::TooFewIdSamples { .. })
        ));
    }

    #[test]
    fn percentile_exceedance_count_contract() {
        // with distinct samples and a non-integral rank, exactly
        // ceil((1 - p/100) n) samples exceed tau; integer arithmetic for the
        // expected count avoids float-ceiling artifacts
        let mut rng = crate::rng::stream(0, "pct", 0);
        for _ in 0..50 {
            let n: usize = rng.gen_range(20..200);
            let p: usize = [80, 90, 95, 99][rng.gen_range(0..4)];
            if (n - 1) * p % 100 == 0 {
                continue; // integral rank: tau sits exactly on a sample
            }
            let mut samples: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
            samples.dedup();
            if samples.len() != n {
                continue;
            }
            let tau = threshold_percentile(&samples, p as f64).unwrap();
            let above = samples.iter().filter(|&&v| v > tau).count();
            let expected = (100 * n - p * n).div_ceil(100);
            assert_eq!(above, expected, "n={n} p={p}");
        }
    }

    #[test]
    fn gaussian_threshold_formula() {
        let tau = threshold_gaussian(1.0, 4, 0.05);
        assert!((tau - 1.8224).abs() < 1e-3, "tau {tau}");

        // alpha = 0.5 -> z = 0 -> tau = sigma_in^2
        let tau = threshold_gaussian(2.0, 4, 0.5);
        assert!((tau - 2.0).abs() < 1e-12);

        // strictly decreasing in N for alpha < 0.5
        let mut prev = f64::INFINITY;
        for n in 2..=64 {
            let t = threshold_gaussian(1.0, n, 0.05);
            assert!(t < prev);
            prev = t;
        }
    }

    #[test]
    fn gate_decision_thresholding_and_monotonicity() {
        let ensemble = init_ensemble(2, 4, 2, 2).unwrap();
        let data = tiny_dataset(2);
        let trace = variance_trace(&ensemble, &data).unwrap();
        let mean = trace.iter().sum::<f64>() / trace.len() as f64;

        // calibration sets placing tau just below / above the measured mean
        let id_below = vec![mean * 0.5; 30];
        let id_above = vec![mean * 2.0; 30];
        let cfg = GateConfig::default();
        let r1 = gate_decision(&ensemble, &data, &cfg, &id_below).unwrap();
        assert_eq!(r1.decision, GateDecision::Continue);
        let r2 = gate_decision(&ensemble, &data, &cfg, &id_above).unwrap();
        assert_eq!(r2.decision, GateDecision::Deploy);
        // raising tau never flips deploy back to continue
        assert!(r2.tau > r1.tau);
    }

    #[test]
    fn empty_target_is_an_error() {
        let ensemble = init_ensemble(2, 4, 2, 2).unwrap();
        let mut data = tiny_dataset(1);
        data.episodes.clear();
        assert!(matches!(
            gate_decision(&ensemble, &data, &GateConfig::default(), &[0.0; 30]),
            Err(GateError::EmptyTarget)
        ));
    }

    #[test]
    fn kl_uniform_samples_are_in_coverage() {
        let mut rng = crate::rng::stream(1, "kl", 0);
        let samples: Vec<f64> = (0..10_000).map(|_| 1.0 + 4.0 * rng.gen::<f64>()).collect();
        let cov = kl_coverage(&samples, [1.0, 5.0], 0.25).unwrap();
        assert!(cov.kl < 0.02, "kl {}", cov.kl);
        assert!(cov.in_coverage);
    }

    #[test]
    fn kl_single_bin_collapse() {
        let samples = vec![1.01; 200];
        let cov = kl_coverage(&samples, [1.0, 5.0], 0.25).unwrap();
        let ln16 = (16.0f64).ln();
        assert!((cov.kl - ln16).abs() < 1e-12, "kl {}", cov.kl);
        assert!(!cov.in_coverage);

        // infinite budget always covers
        let cov = kl_coverage(&samples, [1.0, 5.0], f64::INFINITY).unwrap();
        assert!(cov.in_coverage);
    }

    #[test]
    fn kl_needs_enough_samples() {
        assert!(matches!(
            kl_coverage(&[1.0; 10], [0.0, 1.0], 0.25),
            Err(GateError::TooFewPhiSamples { .. })
        ));
    }
}
