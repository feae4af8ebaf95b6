//! Critic ensemble with the diversity loss, variance statistics, and the
//! adaptive diversity coefficient.
//!
//! Each member regresses onto its Bellman targets on nominal data while an
//! exponential penalty pushes it away from its own Bellman target on
//! repulsive data, so disagreement concentrates where the dynamics were
//! randomized. The diversity residual uses the online network on both sides;
//! the nominal TD term uses target copies.


use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Role, Transition};
use crate::nn::Mlp;
use crate::rng::stream;

pub const HIDDEN_WIDTH: usize = 64;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("non-finite value in network input")]
    NonFiniteInput,
    #[error("batch role misuse: expected {expected:?}, got {got:?}")]
    RoleMisuse { expected: Role, got: Role },
    #[error("empty batch")]
    EmptyBatch,
}

/// Q-network plus its Polyak-averaged target copy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Approximator {
    pub online: Mlp,
    pub target: Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticEnsemble {
    pub members: Vec<Approximator>,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl CriticEnsemble {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Independently initialized members; targets start equal to the online nets.
pub fn init_ensemble(
    n: usize,
    state_dim: usize,
    action_dim: usize,
    seed: u64,
) -> Result<CriticEnsemble, EnsembleError> {
    if n < 2 {
        return Err(EnsembleError::TooFewMembers(n));
    }
    let sizes = [state_dim + action_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, 1];
    let members: Vec<Approximator> = (0..n)
        .map(|i| {
            let online = Mlp::init(&sizes, &mut stream(seed, "critic_init", i as u64));
            let target = online.clone();
            Approximator { online, target }
        })
        .collect();
    for i in 0..n {
        for j in i + 1..n {
            debug_assert_ne!(
                members[i].online.params(),
                members[j].online.params(),
                "member initializations must differ"
            );
        }
    }
    Ok(CriticEnsemble {
        members,
        state_dim,
        action_dim,
    })
}

fn check_finite(xs: &[f64]) -> Result<(), EnsembleError> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(EnsembleError::NonFiniteInput);
    }
    Ok(())
}

/// All members' predictions at one state-action pair, in member order.
pub fn predict(
    ensemble: &CriticEnsemble,
    state: &[f64],
    action: &[f64],
) -> Result<Vec<f64>, EnsembleError> {
    check_finite(state)?;
    check_finite(action)?;
    let mut input = Vec::with_capacity(state.len() + action.len());
    input.extend_from_slice(state);
    input.extend_from_slice(action);
    Ok(ensemble
        .members
        .iter()
        .map(|m| m.online.forward_one(&input)[0])
        .collect())
}

/// Target-copy predictions, same layout as `predict`.
pub fn predict_target(
    ensemble: &CriticEnsemble,
    state: &[f64],
    action: &[f64],
) -> Result<Vec<f64>, EnsembleError> {
    check_finite(state)?;
    check_finite(action)?;
    let mut input = Vec::with_capacity(state.len() + action.len());
    input.extend_from_slice(state);
    input.extend_from_slice(action);
    Ok(ensemble
        .members
        .iter()
        .map(|m| m.target.forward_one(&input)[0])
        .collect())
}

/// Ensemble mean and population variance (1/N divisor).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceStats {
    pub mu: f64,
    pub sigma2: f64,
}

pub fn mean_var(values: &[f64]) -> VarianceStats {
    debug_assert!(values.len() >= 2, "variance over fewer than 2 critics");
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let sigma2 = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    VarianceStats { mu, sigma2 }
}

/// Flattened batch of transitions ready for network input.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub dones: Vec<f64>,
    pub n: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub role: Role,
}

impl Minibatch {
    pub fn from_transitions(transitions: &[&Transition], role: Role) -> Result<Self, EnsembleError> {
        if transitions.is_empty() {
            return Err(EnsembleError::EmptyBatch);
        }
        let state_dim = transitions[0].state.len();
        let action_dim = transitions[0].action.len();
        let n = transitions.len();
        let mut b = Minibatch {
            states: Vec::with_capacity(n * state_dim),
            actions: Vec::with_capacity(n * action_dim),
            rewards: Vec::with_capacity(n),
            next_states: Vec::with_capacity(n * state_dim),
            dones: Vec::with_capacity(n),
            n,
            state_dim,
            action_dim,
            role,
        };
        for t in transitions {
            b.states.extend_from_slice(&t.state);
            b.actions.extend_from_slice(&t.action);
            b.rewards.push(t.reward);
            b.next_states.extend_from_slice(&t.next_state);
            b.dones.push(if t.done { 1.0 } else { 0.0 });
        }
        Ok(b)
    }

    /// Rows of state || action.
    pub fn sa_input(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.state_dim + self.action_dim));
        for i in 0..self.n {
            out.extend_from_slice(&self.states[i * self.state_dim..(i + 1) * self.state_dim]);
            out.extend_from_slice(&self.actions[i * self.action_dim..(i + 1) * self.action_dim]);
        }
        out
    }

    /// Rows of next_state || next_action for caller-supplied next actions.
    pub fn next_sa_input(&self, next_actions: &[f64]) -> Vec<f64> {
        assert_eq!(next_actions.len(), self.n * self.action_dim);
        let mut out = Vec::with_capacity(self.n * (self.state_dim + self.action_dim));
        for i in 0..self.n {
            out.extend_from_slice(&self.next_states[i * self.state_dim..(i + 1) * self.state_dim]);
            out.extend_from_slice(&next_actions[i * self.action_dim..(i + 1) * self.action_dim]);
        }
        out
    }
}

/// Sum over the batch of exp(-(Q(s,a) - (r + gamma Q(s',a')))^2 / (2 delta^2))
/// for one member, with the gradient flowing through both sides of the
/// residual (same online network evaluates both).
///
/// Returns the summed penalty and its parameter gradient.
pub fn diversity_loss(
    member: &Mlp,
    batch: &Minibatch,
    next_actions: &[f64],
    delta: f64,
    gamma: f64,
) -> Result<(f64, Vec<f64>), EnsembleError> {
    batch_role_check(batch, Role::Repulsive)?;
    let (loss, grad, _) = diversity_inner(member, batch, next_actions, delta, gamma, true);
    Ok((loss, grad.unwrap()))
}

/// Value-only variant used for loss reporting and the adaptive coefficient.
pub fn diversity_value(
    member: &Mlp,
    batch: &Minibatch,
    next_actions: &[f64],
    delta: f64,
    gamma: f64,
) -> Result<f64, EnsembleError> {
    batch_role_check(batch, Role::Repulsive)?;
    let (loss, _, _) = diversity_inner(member, batch, next_actions, delta, gamma, false);
    Ok(loss)
}

fn batch_role_check(batch: &Minibatch, expected: Role) -> Result<(), EnsembleError> {
    if batch.n == 0 {
        return Err(EnsembleError::EmptyBatch);
    }
    if batch.role != expected {
        return Err(EnsembleError::RoleMisuse {
            expected,
            got: batch.role,
        });
    }
    Ok(())
}

fn diversity_inner(
    member: &Mlp,
    batch: &Minibatch,
    next_actions: &[f64],
    delta: f64,
    gamma: f64,
    with_grad: bool,
) -> (f64, Option<Vec<f64>>, Vec<f64>) {
    let sa = batch.sa_input();
    let s2a2 = batch.next_sa_input(next_actions);
    let (q_sa, cache_sa) = member.forward_batch(&sa, batch.n);
    let (q_next, cache_next) = member.forward_batch(&s2a2, batch.n);

    let inv = 1.0 / (2.0 * delta * delta);
    let mut loss = 0.0;
    let mut terms = Vec::with_capacity(batch.n);
    let mut residuals = Vec::with_capacity(batch.n);
    for j in 0..batch.n {
        let res = q_sa[j] - (batch.rewards[j] + gamma * q_next[j]);
        let term = (-res * res * inv).exp();
        loss += term;
        terms.push(term);
        residuals.push(res);
    }

    if !with_grad {
        return (loss, None, terms);
    }

    let mut grad = vec![0.0; member.n_params()];
    let inv_d2 = 1.0 / (delta * delta);
    let grad_sa: Vec<f64> = (0..batch.n)
        .map(|j| -terms[j] * residuals[j] * inv_d2)
        .collect();
    let grad_next: Vec<f64> = (0..batch.n)
        .map(|j| terms[j] * residuals[j] * inv_d2 * gamma)
        .collect();
    member.backward(&cache_sa, &grad_sa, &mut grad, None);
    member.backward(&cache_next, &grad_next, &mut grad, None);
    (loss, Some(grad), terms)
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CriticLossParts {
    /// Mean squared TD error on the nominal batch.
    pub rl: f64,
    /// Mean diversity term on the repulsive batch (unscaled by lambda).
    pub div: f64,
    pub lambda: f64,
}

impl CriticLossParts {
    pub fn total(&self) -> f64 {
        self.rl + self.lambda * self.div
    }
}

/// Full per-member policy-evaluation loss: TD regression onto precomputed
/// targets plus lambda times the mean diversity penalty. With lambda = 0 the
/// result is the backbone TD loss, bit for bit (no diversity gradient is
/// added at all).
pub fn critic_loss(
    member: &Mlp,
    nominal: &Minibatch,
    targets: &[f64],
    repulsive: Option<(&Minibatch, &[f64])>,
    lambda: f64,
    delta: f64,
    gamma: f64,
) -> Result<(CriticLossParts, Vec<f64>), EnsembleError> {
    batch_role_check(nominal, Role::Nominal)?;
    assert_eq!(targets.len(), nominal.n);

    let sa = nominal.sa_input();
    let (q, cache) = member.forward_batch(&sa, nominal.n);
    let inv_n = 1.0 / nominal.n as f64;
    let mut rl = 0.0;
    let mut grad_out = Vec::with_capacity(nominal.n);
    for j in 0..nominal.n {
        let err = q[j] - targets[j];
        rl += err * err * inv_n;
        grad_out.push(2.0 * err * inv_n);
    }
    let mut grad = vec![0.0; member.n_params()];
    member.backward(&cache, &grad_out, &mut grad, None);

    let mut div = 0.0;
    if let Some((rb, next_actions)) = repulsive {
        batch_role_check(rb, Role::Repulsive)?;
        let inv_b = 1.0 / rb.n as f64;
        if lambda > 0.0 {
            let (sum, dgrad) = diversity_loss(member, rb, next_actions, delta, gamma)?;
            div = sum * inv_b;
            let scale = lambda * inv_b;
            for (g, d) in grad.iter_mut().zip(dgrad.iter()) {
                *g += scale * d;
            }
        } else {
            div = diversity_value(member, rb, next_actions, delta, gamma)? * inv_b;
        }
    }

    Ok((CriticLossParts { rl, div, lambda }, grad))
}

/// Coefficient keeping the diversity term at `target_fraction` of the total
/// loss: lambda * div = f * (rl + lambda * div).
///
/// Degenerate inputs keep the previous coefficient: a non-positive diversity
/// term, or one so far underflowed that the quotient is no longer finite
/// (the exponential penalty saturates to zero once the ensemble disagrees
/// far beyond the kernel width delta).
pub fn adaptive_lambda(
    current_rl_loss: f64,
    current_div_loss: f64,
    target_fraction: f64,
    previous: f64,
) -> f64 {
    if target_fraction <= 0.0 {
        return 0.0;
    }
    if !current_div_loss.is_finite() || current_div_loss <= 0.0 {
        return previous;
    }
    if current_rl_loss <= 0.0 {
        eprintln!("adaptive_lambda: non-positive TD loss, pinning lambda to 0");
        return 0.0;
    }
    let lambda = target_fraction * current_rl_loss / ((1.0 - target_fraction) * current_div_loss);
    if !lambda.is_finite() {
        return previous;
    }
    lambda
}

/// Random inputs helper shared by tests.
#[cfg(test)]
pub(crate) fn random_batch(
    n: usize,
    state_dim: usize,
    action_dim: usize,
    role: Role,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Minibatch {
    use rand::Rng;
    let mut b = Minibatch {
        states: (0..n * state_dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        actions: (0..n * action_dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        rewards: (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        next_states: (0..n * state_dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        dones: vec![0.0; n],
        n,
        state_dim,
        action_dim,
        role,
    };
    b.dones[n - 1] = 1.0;
    b
}
