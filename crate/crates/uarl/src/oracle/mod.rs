//! Exact tabular verification: fixed points, Lipschitz constants, Wasserstein
//! distances, operator-perturbation and value-error bound certificates, and
//! the uncertainty-weighted Bellman machinery.

mod fitted_q;
mod wasserstein;

pub use fitted_q::{
    bias_reduction_construction, check_bias_reduction, eq7_weights, mode_switch_family,
    mode_switch_scenario, policy_suboptimality, weighted_bellman_apply, weighted_fitted_q,
    BiasReductionSample, FittedQOutcome, MixedPhiScenario, TaggedSample,
};
pub use wasserstein::{w1_discrete, TransportError};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::envs::{build_slipgrid, TabularMdp};
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("value iteration did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("policy has length {got}, expected {expected}")]
    PolicyLength { got: usize, expected: usize },
    #[error("policy action {action} out of range at state {state}")]
    PolicyAction { state: usize, action: usize },
    #[error("MDP pair has mismatched shapes or metrics")]
    MismatchedPair,
    #[error("no transition covers state-action ({state}, {action})")]
    Uncovered { state: usize, action: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

pub const FIXED_POINT_TOL: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 1_000_000;
/// Exactness tolerance for certificate comparisons.
pub const CERT_TOL: f64 = 1e-10;

/// Exact fixed-point Q-table of a deterministic policy, with provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QTable {
    pub q: Vec<f64>,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub mdp_id: String,
    pub policy_id: String,
}

impl QTable {
    pub fn at(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn sup_norm(&self) -> f64 {
        self.q.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn check_policy(mdp: &TabularMdp, policy: &[usize]) -> Result<(), OracleError> {
    if policy.len() != mdp.n_states {
        return Err(OracleError::PolicyLength {
            got: policy.len(),
            expected: mdp.n_states,
        });
    }
    for (s, &a) in policy.iter().enumerate() {
        if a >= mdp.n_actions {
            return Err(OracleError::PolicyAction { state: s, action: a });
        }
    }
    Ok(())
}

/// One application of the policy Bellman operator to arbitrary Q-values.
pub fn apply_bellman(mdp: &TabularMdp, q: &[f64], policy: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; mdp.n_states * mdp.n_actions];
    let next_values: Vec<f64> = (0..mdp.n_states)
        .map(|s| q[s * mdp.n_actions + policy[s]])
        .collect();
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let row = mdp.row(s, a);
            let exp: f64 = row.iter().zip(&next_values).map(|(p, v)| p * v).sum();
            out[s * mdp.n_actions + a] = mdp.reward_at(s, a) + mdp.gamma * exp;
        }
    }
    out
}

/// Value iteration on the policy operator to the unique fixed point
/// (sup-norm tolerance 1e-12).
pub fn exact_q(mdp: &TabularMdp, policy: &[usize], mdp_id: &str) -> Result<QTable, OracleError> {
    check_policy(mdp, policy)?;
    let mut q = vec![0.0; mdp.n_states * mdp.n_actions];
    for _ in 0..MAX_SWEEPS {
        let next = apply_bellman(mdp, &q, policy);
        let diff = q
            .iter()
            .zip(&next)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        q = next;
        if diff < FIXED_POINT_TOL {
            return Ok(QTable {
                q,
                n_states: mdp.n_states,
                n_actions: mdp.n_actions,
                gamma: mdp.gamma,
                mdp_id: mdp_id.to_string(),
                policy_id: format!("policy[{}]", policy.len()),
            });
        }
    }
    Err(OracleError::NoConvergence(MAX_SWEEPS))
}

/// Optimal Q via value iteration on the optimality operator.
pub fn exact_q_star(mdp: &TabularMdp) -> Result<Vec<f64>, OracleError> {
    let mut q = vec![0.0; mdp.n_states * mdp.n_actions];
    for _ in 0..MAX_SWEEPS {
        let max_values: Vec<f64> = (0..mdp.n_states)
            .map(|s| {
                (0..mdp.n_actions)
                    .map(|a| q[s * mdp.n_actions + a])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let mut next = vec![0.0; q.len()];
        let mut diff = 0.0f64;
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let row = mdp.row(s, a);
                let exp: f64 = row.iter().zip(&max_values).map(|(p, v)| p * v).sum();
                let v = mdp.reward_at(s, a) + mdp.gamma * exp;
                diff = diff.max((v - q[s * mdp.n_actions + a]).abs());
                next[s * mdp.n_actions + a] = v;
            }
        }
        q = next;
        if diff < FIXED_POINT_TOL {
            return Ok(q);
        }
    }
    Err(OracleError::NoConvergence(MAX_SWEEPS))
}

/// Greedy policy of a Q-table; ties break toward the lowest action index.
pub fn greedy_policy(q: &[f64], n_states: usize, n_actions: usize) -> Vec<usize> {
    (0..n_states)
        .map(|s| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for a in 0..n_actions {
                let v = q[s * n_actions + a];
                if v > best_v {
                    best_v = v;
                    best = a;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub l_r: f64,
    pub l_t: f64,
}

/// Exact maxima of the reward and transition difference quotients over all
/// state-action pairs (the transition quotient in 1-Wasserstein distance over
/// the state ground metric).
pub fn lipschitz_constants(mdp: &TabularMdp) -> Result<LipschitzReport, OracleError> {
    let n_sa = mdp.n_sa();
    let state_cost: Vec<f64> = (0..mdp.n_states)
        .flat_map(|s1| (0..mdp.n_states).map(move |s2| (s1, s2)))
        .map(|(s1, s2)| mdp.state_distance(s1, s2))
        .collect();
    let mut l_r = 0.0f64;
    let mut l_t = 0.0f64;
    for i in 0..n_sa {
        let (s1, a1) = (i / mdp.n_actions, i % mdp.n_actions);
        for j in i + 1..n_sa {
            let (s2, a2) = (j / mdp.n_actions, j % mdp.n_actions);
            let d = mdp.metric_at(s1, a1, s2, a2);
            l_r = l_r.max((mdp.reward_at(s1, a1) - mdp.reward_at(s2, a2)).abs() / d);
            let w = w1_discrete(mdp.row(s1, a1), mdp.row(s2, a2), &state_cost)?;
            l_t = l_t.max(w / d);
        }
    }
    Ok(LipschitzReport { l_r, l_t })
}

/// Lipschitz seminorm of Q-values under the MDP's state-action metric.
pub fn q_lipschitz(q: &[f64], mdp: &TabularMdp) -> f64 {
    let n_sa = mdp.n_sa();
    let mut lip = 0.0f64;
    for i in 0..n_sa {
        let (s1, a1) = (i / mdp.n_actions, i % mdp.n_actions);
        for j in i + 1..n_sa {
            let (s2, a2) = (j / mdp.n_actions, j % mdp.n_actions);
            lip = lip.max((q[i] - q[j]).abs() / mdp.metric_at(s1, a1, s2, a2));
        }
    }
    lip
}

/// Outcome of one bound check. `holds == None` means the check's assumption
/// was unmet and it was skipped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub check: String,
    pub inputs_digest: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: Option<bool>,
    pub details: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<serde_json::Value>,
}

impl Certificate {
    pub fn violated(&self) -> bool {
        self.holds == Some(false)
    }
}

pub fn digest_inputs(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    format!("{:x}", h.finalize())[..16].to_string()
}

fn pair_compatible(a: &TabularMdp, b: &TabularMdp) -> Result<(), OracleError> {
    if a.n_states != b.n_states
        || a.n_actions != b.n_actions
        || a.gamma != b.gamma
        || a.metric != b.metric
    {
        return Err(OracleError::MismatchedPair);
    }
    Ok(())
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub(crate) fn certificate(
    check: &str,
    digest: String,
    lhs: f64,
    rhs: f64,
    holds: bool,
    details: serde_json::Value,
) -> Certificate {
    let counterexample = if holds {
        None
    } else {
        Some(serde_json::json!({ "lhs": lhs, "rhs": rhs, "details": details }))
    };
    Certificate {
        check: check.to_string(),
        inputs_digest: digest,
        lhs,
        rhs,
        holds: Some(holds),
        details,
        counterexample,
    }
}

/// Fixed-point gap lower bound: for a dynamics shift the critics' fixed
/// points must separate by at least
/// gamma (L_R + L_T ||Q||_Lip) / (1 + gamma) * |phi_t - phi|,
/// with the constants taken on the target-side MDP. Both sides' constants are
/// recorded in the certificate.
pub fn check_critic_gap(
    factory: &dyn Fn(f64) -> TabularMdp,
    policy: &[usize],
    phi: f64,
    phi_t: f64,
) -> Result<Certificate, OracleError> {
    let mdp = factory(phi);
    let mdp_t = factory(phi_t);
    pair_compatible(&mdp, &mdp_t)?;
    let q = exact_q(&mdp, policy, &format!("phi={phi}"))?;
    let q_t = exact_q(&mdp_t, policy, &format!("phi={phi_t}"))?;
    let gap = sup_diff(&q.q, &q_t.q);

    let consts_t = lipschitz_constants(&mdp_t)?;
    let consts_s = lipschitz_constants(&mdp)?;
    let q_lip_t = q_lipschitz(&q_t.q, &mdp_t);
    let gamma = mdp.gamma;
    let bound =
        gamma * (consts_t.l_r + consts_t.l_t * q_lip_t) / (1.0 + gamma) * (phi_t - phi).abs();
    let holds = gap >= bound - CERT_TOL;
    let details = serde_json::json!({
        "phi": phi, "phi_t": phi_t, "gamma": gamma,
        "l_r_target": consts_t.l_r, "l_t_target": consts_t.l_t,
        "l_r_source": consts_s.l_r, "l_t_source": consts_s.l_t,
        "q_lip_target": q_lip_t,
    });
    Ok(certificate(
        "critic_gap",
        digest_inputs(&[&format!("{phi}|{phi_t}|{gamma}|{}", mdp.n_states)]),
        gap,
        bound,
        holds,
        details,
    ))
}

/// Fixed-point gap upper bound:
/// gamma / (1 - gamma) (L_R + L_T ||Q||_Lip) * |phi - phi_t|.
pub fn check_value_error_bound(
    factory: &dyn Fn(f64) -> TabularMdp,
    policy: &[usize],
    phi: f64,
    phi_t: f64,
) -> Result<Certificate, OracleError> {
    let mdp = factory(phi);
    let mdp_t = factory(phi_t);
    pair_compatible(&mdp, &mdp_t)?;
    let q = exact_q(&mdp, policy, &format!("phi={phi}"))?;
    let q_t = exact_q(&mdp_t, policy, &format!("phi={phi_t}"))?;
    let gap = sup_diff(&q.q, &q_t.q);

    let consts_t = lipschitz_constants(&mdp_t)?;
    let q_lip_t = q_lipschitz(&q_t.q, &mdp_t);
    let gamma = mdp.gamma;
    let bound =
        gamma / (1.0 - gamma) * (consts_t.l_r + consts_t.l_t * q_lip_t) * (phi - phi_t).abs();
    let holds = gap <= bound + CERT_TOL;
    let details = serde_json::json!({
        "phi": phi, "phi_t": phi_t, "gamma": gamma,
        "l_r_target": consts_t.l_r, "l_t_target": consts_t.l_t,
        "q_lip_target": q_lip_t,
    });
    Ok(certificate(
        "value_error",
        digest_inputs(&[&format!("{phi}|{phi_t}|{gamma}|{}", mdp.n_states)]),
        gap,
        bound,
        holds,
        details,
    ))
}

/// Operator perturbation: applying the two Bellman operators to the same Q
/// moves it by at most gamma (L_R + L_T ||Q||_Lip) |phi_1 - phi_2|.
pub fn check_operator_perturbation(
    factory: &dyn Fn(f64) -> TabularMdp,
    policy: &[usize],
    phi_1: f64,
    phi_2: f64,
    q_values: &[f64],
) -> Result<Certificate, OracleError> {
    let mdp_1 = factory(phi_1);
    let mdp_2 = factory(phi_2);
    pair_compatible(&mdp_1, &mdp_2)?;
    check_policy(&mdp_1, policy)?;
    let t1 = apply_bellman(&mdp_1, q_values, policy);
    let t2 = apply_bellman(&mdp_2, q_values, policy);
    let lhs = sup_diff(&t1, &t2);

    let consts = lipschitz_constants(&mdp_2)?;
    let q_lip = q_lipschitz(q_values, &mdp_2);
    let gamma = mdp_1.gamma;
    let bound = gamma * (consts.l_r + consts.l_t * q_lip) * (phi_1 - phi_2).abs();
    let holds = lhs <= bound + CERT_TOL;
    let details = serde_json::json!({
        "phi_1": phi_1, "phi_2": phi_2, "gamma": gamma,
        "l_r": consts.l_r, "l_t": consts.l_t, "q_lip": q_lip,
    });
    Ok(certificate(
        "operator_perturbation",
        digest_inputs(&[&format!("{phi_1}|{phi_2}|{gamma}|{}", mdp_1.n_states)]),
        lhs,
        bound,
        holds,
        details,
    ))
}

/// Randomized slip-grid family used by the certificate sweeps: 2x2 to 4x4
/// grids at gamma 0.9 with the slip probability as the scalar phi.
pub struct SweepFamily {
    pub width: usize,
    pub height: usize,
    pub gamma: f64,
    pub phi: f64,
    pub phi_t: f64,
}

pub fn random_family(rng: &mut ChaCha8Rng) -> SweepFamily {
    let width = rng.gen_range(2..=4);
    let height = rng.gen_range(2..=4);
    let phi = rng.gen_range(0.0..0.2);
    let phi_t = phi + rng.gen_range(0.1..0.35);
    SweepFamily {
        width,
        height,
        gamma: 0.9,
        phi,
        phi_t,
    }
}

impl SweepFamily {
    pub fn factory(&self) -> impl Fn(f64) -> TabularMdp + '_ {
        move |slip| build_slipgrid(self.width, self.height, slip, self.gamma).unwrap()
    }

    pub fn policy(&self) -> Vec<usize> {
        crate::envs::greedy_goal_policy(self.width, self.height)
    }
}

/// Sweeps `trials` random MDP pairs through one of the bound checks.
pub fn run_certificate_sweep(
    check: &str,
    trials: usize,
    seed: u64,
) -> Result<Vec<Certificate>, OracleError> {
    let mut rng = stream(seed, "oracle_sweep", 0);
    let mut certs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let fam = random_family(&mut rng);
        let factory = fam.factory();
        let policy = fam.policy();
        let cert = match check {
            "critic_gap" => check_critic_gap(&factory, &policy, fam.phi, fam.phi_t)?,
            "value_error" => check_value_error_bound(&factory, &policy, fam.phi, fam.phi_t)?,
            "operator_perturbation" => {
                let n = fam.width * fam.height * 4;
                let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                check_operator_perturbation(&factory, &policy, fam.phi, fam.phi_t, &q)?
            }
            other => panic!("unknown sweep {other}"),
        };
        certs.push(cert);
    }
    Ok(certs)
}
