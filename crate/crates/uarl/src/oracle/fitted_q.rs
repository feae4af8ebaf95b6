//! Uncertainty-weighted Bellman backups, the bias-reduction certificate, and
//! weighted fitted-Q iteration with exact tabular regression.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    certificate, digest_inputs, exact_q, exact_q_star, greedy_policy, Certificate, OracleError,
    CERT_TOL,
};
use crate::buffer::uncertainty_weight;
use crate::data::Role;
use crate::envs::TabularMdp;

/// A dataset sample for tabular backups: a state-action pair tagged with the
/// domain parameter that generated it.
#[derive(Debug, Clone, Copy)]
pub struct TaggedSample {
    pub state: usize,
    pub action: usize,
    pub phi: f64,
}

/// Two-branch weights from per-sample variance and role tags.
pub fn eq7_weights(sigma2: &[f64], roles: &[Role]) -> Result<Vec<f64>, crate::buffer::BufferError> {
    sigma2
        .iter()
        .zip(roles)
        .map(|(&s2, &role)| uncertainty_weight(s2, role))
        .collect()
}

fn mdp_cache<'a>(
    samples: &[TaggedSample],
    factory: &'a dyn Fn(f64) -> TabularMdp,
) -> Vec<(f64, TabularMdp)> {
    let mut cache: Vec<(f64, TabularMdp)> = Vec::new();
    for s in samples {
        if !cache.iter().any(|(phi, _)| *phi == s.phi) {
            cache.push((s.phi, factory(s.phi)));
        }
    }
    cache
}

fn cached<'a>(cache: &'a [(f64, TabularMdp)], phi: f64) -> &'a TabularMdp {
    &cache.iter().find(|(p, _)| *p == phi).unwrap().1
}

/// Weight-normalized average of per-sample backups
/// r + gamma E_{s' ~ T_phi}[Q(s', pi(s'))], grouped per (s, a). Each sample's
/// expectation runs under its own generating dynamics.
pub fn weighted_bellman_apply(
    samples: &[TaggedSample],
    weights: &[f64],
    factory: &dyn Fn(f64) -> TabularMdp,
    q: &[f64],
    policy: &[usize],
) -> Result<HashMap<(usize, usize), f64>, OracleError> {
    assert_eq!(samples.len(), weights.len());
    let cache = mdp_cache(samples, factory);
    let (_, probe) = &cache[0];
    let next_values: Vec<f64> = (0..probe.n_states)
        .map(|s| q[s * probe.n_actions + policy[s]])
        .collect();

    let mut acc: HashMap<(usize, usize), (f64, f64)> = HashMap::new();
    for (sample, &w) in samples.iter().zip(weights) {
        let mdp = cached(&cache, sample.phi);
        let row = mdp.row(sample.state, sample.action);
        let exp: f64 = row.iter().zip(&next_values).map(|(p, v)| p * v).sum();
        let backup = mdp.reward_at(sample.state, sample.action) + mdp.gamma * exp;
        let e = acc.entry((sample.state, sample.action)).or_insert((0.0, 0.0));
        e.0 += w * backup;
        e.1 += w;
    }
    Ok(acc
        .into_iter()
        .map(|(k, (num, den))| (k, num / den))
        .collect())
}

#[derive(Debug, Clone)]
pub struct FittedQOutcome {
    pub policy: Vec<usize>,
    pub suboptimality: f64,
    pub q: Vec<f64>,
}

/// Exact value loss of running `policy` in `mdp` instead of acting optimally:
/// max_s (V*(s) - V^pi(s)).
pub fn policy_suboptimality(mdp: &TabularMdp, policy: &[usize]) -> Result<f64, OracleError> {
    let q_star = exact_q_star(mdp)?;
    let q_pi = exact_q(mdp, policy, "eval")?;
    let mut worst = 0.0f64;
    for s in 0..mdp.n_states {
        let v_star = (0..mdp.n_actions)
            .map(|a| q_star[s * mdp.n_actions + a])
            .fold(f64::NEG_INFINITY, f64::max);
        let v_pi = q_pi.at(s, policy[s]);
        worst = worst.max(v_star - v_pi);
    }
    Ok(worst)
}

/// K rounds of weighted empirical Bellman optimality backups with exact
/// regression, followed by exact evaluation of the greedy policy on the
/// target MDP. Every (s, a) must be covered by at least one sample.
pub fn weighted_fitted_q(
    factory: &dyn Fn(f64) -> TabularMdp,
    samples: &[TaggedSample],
    weights: &[f64],
    phi_t: f64,
    k_rounds: usize,
) -> Result<FittedQOutcome, OracleError> {
    let mdp_t = factory(phi_t);
    let (n_states, n_actions) = (mdp_t.n_states, mdp_t.n_actions);
    let mut covered = vec![false; n_states * n_actions];
    for s in samples {
        covered[s.state * n_actions + s.action] = true;
    }
    if let Some(i) = covered.iter().position(|c| !c) {
        return Err(OracleError::Uncovered {
            state: i / n_actions,
            action: i % n_actions,
        });
    }

    let cache = mdp_cache(samples, factory);
    let mut q = vec![0.0; n_states * n_actions];
    for _ in 0..k_rounds {
        let max_values: Vec<f64> = (0..n_states)
            .map(|s| {
                (0..n_actions)
                    .map(|a| q[s * n_actions + a])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let mut num = vec![0.0; n_states * n_actions];
        let mut den = vec![0.0; n_states * n_actions];
        for (sample, &w) in samples.iter().zip(weights) {
            let mdp = cached(&cache, sample.phi);
            let row = mdp.row(sample.state, sample.action);
            let exp: f64 = row.iter().zip(&max_values).map(|(p, v)| p * v).sum();
            let backup = mdp.reward_at(sample.state, sample.action) + mdp.gamma * exp;
            let i = sample.state * n_actions + sample.action;
            num[i] += w * backup;
            den[i] += w;
        }
        for i in 0..q.len() {
            q[i] = num[i] / den[i];
        }
    }
    let policy = greedy_policy(&q, n_states, n_actions);
    let suboptimality = policy_suboptimality(&mdp_t, &policy)?;
    Ok(FittedQOutcome {
        policy,
        suboptimality,
        q,
    })
}

/// Two-state family whose optimal first-state action flips with phi: action 0
/// reaches the rewarding absorbing state with probability phi, action 1 with
/// probability 1 - phi. Uniformly averaging data across a phi mixture biased
/// away from phi_t therefore picks the wrong action.
pub fn mode_switch_family(phi: f64) -> TabularMdp {
    let p = phi.clamp(0.0, 1.0);
    TabularMdp {
        n_states: 2,
        n_actions: 2,
        // rows: (s0,a0), (s0,a1), (s1,a0), (s1,a1)
        transition: vec![
            1.0 - p, p, //
            p, 1.0 - p, //
            0.0, 1.0, //
            0.0, 1.0,
        ],
        reward: vec![0.0, 0.0, 1.0, 1.0],
        gamma: 0.9,
        metric: {
            // state distance 1 plus action indicator
            let mut m = vec![0.0; 16];
            for i in 0..4 {
                for j in 0..4 {
                    let (s1, a1) = (i / 2, i % 2);
                    let (s2, a2) = (j / 2, j % 2);
                    m[i * 4 + j] =
                        (s1 as f64 - s2 as f64).abs() + if a1 == a2 { 0.0 } else { 1.0 };
                }
            }
            m
        },
        r_max: 1.0,
    }
}

/// Bundled mixed-phi scenario: full-coverage samples at phi in {0.1, 0.2,
/// 0.8} with phi_t = 0.8, per-sample variance increasing in the distance to
/// phi_t, and repulsive-branch (inverse-variance) weights.
pub struct MixedPhiScenario {
    pub samples: Vec<TaggedSample>,
    pub sigma2: Vec<f64>,
    pub roles: Vec<Role>,
    pub phi_t: f64,
}

pub fn mode_switch_scenario() -> MixedPhiScenario {
    let phi_t = 0.8;
    let phis = [0.1, 0.2, 0.8];
    let mut samples = Vec::new();
    let mut sigma2 = Vec::new();
    for &phi in &phis {
        for state in 0..2 {
            for action in 0..2 {
                samples.push(TaggedSample { state, action, phi });
                sigma2.push(0.05 + 0.2 * (phi - phi_t as f64).abs());
            }
        }
    }
    let roles = vec![Role::Repulsive; samples.len()];
    MixedPhiScenario {
        samples,
        sigma2,
        roles,
        phi_t,
    }
}

/// One sample for the bias-reduction check: generating parameter, measured
/// ensemble variance, and the weight branch it falls under.
#[derive(Debug, Clone, Copy)]
pub struct BiasReductionSample {
    pub phi: f64,
    pub sigma2: f64,
    pub role: Role,
}

fn population_cov(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / n
}

/// Bias-reduction inequality: with weights from the two-branch rule and
/// rho-hat the empirical covariance of sigma^2 with the parameter distance,
/// the weighted mean distance must drop below the uniform mean by at least
/// rho-hat / w-bar. Applies only when rho-hat > 0; otherwise the certificate
/// is reported as skipped with the assumption unmet.
pub fn check_bias_reduction(
    samples: &[BiasReductionSample],
    phi_t: f64,
) -> Result<Certificate, crate::buffer::BufferError> {
    let distances: Vec<f64> = samples.iter().map(|s| (s.phi - phi_t).abs()).collect();
    let sigma2: Vec<f64> = samples.iter().map(|s| s.sigma2).collect();
    let roles: Vec<Role> = samples.iter().map(|s| s.role).collect();
    let rho_hat = population_cov(&sigma2, &distances);
    let digest = digest_inputs(&[&format!("{phi_t}|{}", samples.len())]);

    if rho_hat <= 0.0 {
        return Ok(Certificate {
            check: "bias_reduction".into(),
            inputs_digest: digest,
            lhs: f64::NAN,
            rhs: f64::NAN,
            holds: None,
            details: serde_json::json!({
                "status": "assumption_unmet",
                "rho_hat": rho_hat,
            }),
            counterexample: None,
        });
    }

    let weights = eq7_weights(&sigma2, &roles)?;
    let w_bar = weights.iter().sum::<f64>() / weights.len() as f64;
    let w_total: f64 = weights.iter().sum();
    let e_weighted = weights
        .iter()
        .zip(&distances)
        .map(|(w, d)| w * d)
        .sum::<f64>()
        / w_total;
    let e_uniform = distances.iter().sum::<f64>() / distances.len() as f64;
    let rhs = e_uniform - rho_hat / w_bar;
    let holds = e_weighted <= rhs + CERT_TOL;
    Ok(certificate(
        "bias_reduction",
        digest,
        e_weighted,
        rhs,
        holds,
        serde_json::json!({
            "rho_hat": rho_hat,
            "w_bar": w_bar,
            "e_uniform": e_uniform,
        }),
    ))
}

/// Constructed dataset satisfying the variance-distance correlation with
/// sub-unit variances and inverse-variance weights; the regime in which the
/// bias-reduction inequality is numerically satisfiable.
pub fn bias_reduction_construction(rng: &mut ChaCha8Rng) -> (Vec<BiasReductionSample>, f64) {
    let n = rng.gen_range(20..120);
    let phi_t = 1.0;
    let c: f64 = rng.gen_range(0.01..0.1);
    let k: f64 = rng.gen_range(0.1..0.3);
    let samples = (0..n)
        .map(|_| {
            let phi: f64 = rng.gen_range(0.0..1.0);
            let jitter: f64 = rng.gen_range(0.0..0.01);
            BiasReductionSample {
                phi,
                sigma2: c + k * (phi - phi_t).abs() + jitter,
                role: Role::Repulsive,
            }
        })
        .collect();
    (samples, phi_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::build_slipgrid;
    use crate::rng::stream;

    #[test]
    fn uniform_weights_reduce_to_uniform_backup() {
        let factory = |phi: f64| build_slipgrid(2, 2, phi, 0.9).unwrap();
        let samples = vec![
            TaggedSample { state: 0, action: 0, phi: 0.1 },
            TaggedSample { state: 0, action: 0, phi: 0.3 },
        ];
        let q = vec![0.5; 16];
        let policy = vec![0; 4];
        let weighted =
            weighted_bellman_apply(&samples, &[2.0, 2.0], &factory, &q, &policy).unwrap();
        // constant Q: every backup is R + gamma * 0.5 regardless of phi
        let expected = factory(0.1).reward_at(0, 0) + 0.9 * 0.5;
        assert!((weighted[&(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn single_transition_is_its_own_backup() {
        let factory = |phi: f64| build_slipgrid(2, 2, phi, 0.9).unwrap();
        let samples = vec![TaggedSample { state: 1, action: 2, phi: 0.25 }];
        let mut q = vec![0.0; 16];
        for (i, v) in q.iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        let policy = vec![1; 4];
        let out = weighted_bellman_apply(&samples, &[7.0], &factory, &q, &policy).unwrap();
        let mdp = factory(0.25);
        let next: f64 = mdp
            .row(1, 2)
            .iter()
            .enumerate()
            .map(|(s2, p)| p * q[s2 * 4 + policy[s2]])
            .sum();
        let expected = mdp.reward_at(1, 2) + 0.9 * next;
        assert!((out[&(1, 2)] - expected).abs() < 1e-12);
    }

    #[test]
    fn two_transition_weighted_backup_matches_hand_arithmetic() {
        let factory = |phi: f64| mode_switch_family(phi);
        let samples = vec![
            TaggedSample { state: 0, action: 0, phi: 0.2 },
            TaggedSample { state: 0, action: 0, phi: 0.8 },
        ];
        let weights = [1.0, 3.0];
        let q = vec![0.0, 0.0, 2.0, 2.0]; // Q(s1, *) = 2
        let policy = vec![0, 0];
        let out = weighted_bellman_apply(&samples, &weights, &factory, &q, &policy).unwrap();
        // backup(phi) = 0 + 0.9 * (phi * 2 + (1-phi) * 0)
        let b1 = 0.9 * 0.2 * 2.0;
        let b2 = 0.9 * 0.8 * 2.0;
        let expected = (1.0 * b1 + 3.0 * b2) / 4.0;
        assert!((out[&(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn uncovered_query_is_an_error() {
        let factory = |phi: f64| mode_switch_family(phi);
        let samples = vec![TaggedSample { state: 0, action: 0, phi: 0.5 }];
        let weights = [1.0];
        let err = weighted_fitted_q(&factory, &samples, &weights, 0.5, 5).unwrap_err();
        assert!(matches!(err, OracleError::Uncovered { .. }));
    }

    #[test]
    fn fitted_q_on_own_data_recovers_the_optimum() {
        let scenario_phis = [0.8];
        let mut samples = Vec::new();
        for &phi in &scenario_phis {
            for state in 0..2 {
                for action in 0..2 {
                    samples.push(TaggedSample { state, action, phi });
                }
            }
        }
        let weights = vec![1.0; samples.len()];
        let out = weighted_fitted_q(&mode_switch_family, &samples, &weights, 0.8, 200).unwrap();
        assert!(out.suboptimality < 1e-8, "subopt {}", out.suboptimality);
    }

    #[test]
    fn weighted_beats_uniform_on_the_mixed_scenario() {
        let scenario = mode_switch_scenario();
        let weights = eq7_weights(&scenario.sigma2, &scenario.roles).unwrap();
        let weighted = weighted_fitted_q(
            &mode_switch_family,
            &scenario.samples,
            &weights,
            scenario.phi_t,
            100,
        )
        .unwrap();
        let uniform = weighted_fitted_q(
            &mode_switch_family,
            &scenario.samples,
            &vec![1.0; scenario.samples.len()],
            scenario.phi_t,
            100,
        )
        .unwrap();
        assert!(
            weighted.suboptimality <= uniform.suboptimality,
            "weighted {} uniform {}",
            weighted.suboptimality,
            uniform.suboptimality
        );
        // the mixture mean sits on the wrong side of 1/2, so uniform
        // averaging picks the flipped action and pays for it
        assert!(uniform.suboptimality > 1.0);
        assert!(weighted.suboptimality < 1e-8);
    }

    #[test]
    fn k_zero_equals_initial_greedy_suboptimality() {
        let scenario = mode_switch_scenario();
        let weights = eq7_weights(&scenario.sigma2, &scenario.roles).unwrap();
        let out = weighted_fitted_q(
            &mode_switch_family,
            &scenario.samples,
            &weights,
            scenario.phi_t,
            0,
        )
        .unwrap();
        let initial = greedy_policy(&vec![0.0; 4], 2, 2);
        let expected = policy_suboptimality(&mode_switch_family(scenario.phi_t), &initial).unwrap();
        assert_eq!(out.policy, initial);
        assert!((out.suboptimality - expected).abs() < 1e-12);
    }

    #[test]
    fn bias_reduction_two_sample_hand_calculation() {
        let samples = vec![
            BiasReductionSample { phi: 0.5, sigma2: 0.1, role: Role::Repulsive },
            BiasReductionSample { phi: 1.0, sigma2: 0.2, role: Role::Repulsive },
        ];
        let cert = check_bias_reduction(&samples, 0.0).unwrap();
        // rho = 0.0125, w = {10, 5}, w_bar = 7.5
        // E_w = (10*0.5 + 5*1.0)/15 = 2/3, rhs = 0.75 - 0.0125/7.5
        assert!((cert.details["rho_hat"].as_f64().unwrap() - 0.0125).abs() < 1e-12);
        assert!((cert.lhs - 2.0 / 3.0).abs() < 1e-12);
        assert!((cert.rhs - (0.75 - 0.0125 / 7.5)).abs() < 1e-12);
        assert_eq!(cert.holds, Some(true));
    }

    #[test]
    fn variance_independent_of_phi_is_skipped() {
        let samples: Vec<BiasReductionSample> = (0..40)
            .map(|i| BiasReductionSample {
                phi: i as f64 / 40.0,
                sigma2: 0.1,
                role: Role::Repulsive,
            })
            .collect();
        let cert = check_bias_reduction(&samples, 1.0).unwrap();
        assert_eq!(cert.holds, None);
        assert_eq!(cert.details["status"], "assumption_unmet");
    }

    #[test]
    fn constructed_datasets_satisfy_the_inequality() {
        let mut rng = stream(17, "bias", 0);
        for _ in 0..50 {
            let (samples, phi_t) = bias_reduction_construction(&mut rng);
            let cert = check_bias_reduction(&samples, phi_t).unwrap();
            assert_eq!(cert.holds, Some(true), "lhs {} rhs {}", cert.lhs, cert.rhs);
        }
    }
}
