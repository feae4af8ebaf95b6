//! Minimal offline actor-critic backbone (TD3 + behavioral cloning) hosting
//! the ensemble critic loss, with offline training and fine-tuning loops.
//!
//! Determinism contract: every stochastic component draws from its own named
//! stream derived from the config seed, so a run with the diversity term
//! disabled consumes exactly the same draws on the nominal path as the plain
//! backbone and reproduces it bit for bit.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::buffer::{BalancedBuffer, BufferError};
use crate::data::{Dataset, DataError, Role, RolloutPolicy};
use crate::ensemble::{
    adaptive_lambda, critic_loss, diversity_value, init_ensemble, CriticEnsemble,
    CriticLossParts, EnsembleError, Minibatch, HIDDEN_WIDTH,
};
use crate::envs::{make_env, DomainParams, EnvError, EnvSpec};
use crate::nn::{Adam, ForwardCache, Mlp};
use crate::rng::{child_seed, stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Deterministic tanh actor scaled to the action box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Policy {
    pub net: Mlp,
    pub max_action: f64,
    pub state_dim: usize,
    pub action_dim: usize,
}

pub struct ActorCache {
    cache: ForwardCache,
    pre_tanh: Vec<f64>,
    n: usize,
}

impl Policy {
    pub fn init(state_dim: usize, action_dim: usize, max_action: f64, rng: &mut ChaCha8Rng) -> Self {
        let net = Mlp::init(&[state_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, action_dim], rng);
        Self {
            net,
            max_action,
            state_dim,
            action_dim,
        }
    }

    /// Batched deterministic actions with the cache needed for backprop.
    pub fn act_batch(&self, states: &[f64], n: usize) -> (Vec<f64>, ActorCache) {
        let (pre, cache) = self.net.forward_batch(states, n);
        let actions = pre.iter().map(|u| self.max_action * u.tanh()).collect();
        (
            actions,
            ActorCache {
                cache,
                pre_tanh: pre,
                n,
            },
        )
    }

    pub fn act(&self, state: &[f64]) -> Vec<f64> {
        let (a, _) = self.act_batch(state, 1);
        a
    }

    /// Backpropagates gradients w.r.t. the emitted actions through the tanh
    /// scaling into parameter space (accumulating into `grad_params`).
    pub fn backward(&self, cache: &ActorCache, grad_actions: &[f64], grad_params: &mut [f64]) {
        assert_eq!(grad_actions.len(), cache.n * self.action_dim);
        let grad_pre: Vec<f64> = grad_actions
            .iter()
            .zip(cache.pre_tanh.iter())
            .map(|(g, u)| {
                let t = u.tanh();
                g * self.max_action * (1.0 - t * t)
            })
            .collect();
        self.net.backward(&cache.cache, &grad_pre, grad_params, None);
    }
}

/// Wraps a trained actor for rollout collection, optionally with Gaussian
/// exploration noise.
pub struct ActorRolloutPolicy {
    pub policy: Policy,
    pub noise_sigma: f64,
    pub label: String,
}

impl RolloutPolicy for ActorRolloutPolicy {
    fn act(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut a = self.policy.act(state);
        if self.noise_sigma > 0.0 {
            for ai in a.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *ai += self.noise_sigma * z;
            }
        }
        a
    }

    fn id(&self) -> String {
        format!("{}(sigma={})", self.label, self.noise_sigma)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub polyak: f64,
    pub actor_delay: usize,
    pub bc_alpha: f64,
    pub steps: usize,
    /// Step count for fine-tuning phases; falls back to `steps`.
    pub finetune_steps: Option<usize>,
    pub seed: u64,
    pub delta: f64,
    pub lambda_fraction: f64,
    pub ensemble_size: usize,
    pub lr: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub exploration_noise: f64,
    pub lambda_refresh_every: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 256,
            polyak: 5e-3,
            actor_delay: 2,
            bc_alpha: 2.5,
            steps: 5000,
            finetune_steps: None,
            seed: 0,
            delta: 1e-2,
            lambda_fraction: 0.1,
            ensemble_size: 4,
            lr: 3e-4,
            policy_noise: 0.2,
            noise_clip: 0.5,
            exploration_noise: 0.1,
            lambda_refresh_every: 100,
            eval_every: 1000,
            eval_episodes: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::InvalidConfig(msg.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return fail("gamma must be in [0, 1)");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1");
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return fail("polyak must be in (0, 1]");
        }
        if self.actor_delay < 1 {
            return fail("actor_delay must be >= 1");
        }
        if self.delta <= 0.0 {
            return fail("delta must be > 0");
        }
        if !(0.0..1.0).contains(&self.lambda_fraction) {
            return fail("lambda_fraction must be in [0, 1)");
        }
        if self.ensemble_size < 2 {
            return fail("ensemble_size must be >= 2");
        }
        if self.lr <= 0.0 {
            return fail("lr must be > 0");
        }
        if self.lambda_refresh_every < 1 {
            return fail("lambda_refresh_every must be >= 1");
        }
        Ok(())
    }
}

/// Bellman targets: y = r + gamma (1 - done) min_i Q_target_i(s', a') with
/// a' the current policy's next action under clipped smoothing noise.
pub fn td_targets(
    batch: &Minibatch,
    policy: &Policy,
    ensemble: &CriticEnsemble,
    gamma: f64,
    policy_noise: f64,
    noise_clip: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let next_actions = smoothed_next_actions(policy, batch, policy_noise, noise_clip, rng);
    let input = batch.next_sa_input(&next_actions);
    // members read disjoint parameter stores; fold their outputs in member
    // order so the result is scheduling-independent
    let per_member: Vec<Vec<f64>> = ensemble
        .members
        .par_iter()
        .map(|member| member.target.forward_batch(&input, batch.n).0)
        .collect();
    let mut min_q = vec![f64::INFINITY; batch.n];
    for q in &per_member {
        for (m, v) in min_q.iter_mut().zip(q.iter()) {
            *m = m.min(*v);
        }
    }
    (0..batch.n)
        .map(|j| batch.rewards[j] + gamma * (1.0 - batch.dones[j]) * min_q[j])
        .collect()
}

/// pi(s') plus clipped Gaussian smoothing noise, clamped to the action box.
/// Noise is drawn for every sample regardless of scale so that stream
/// consumption does not depend on the configuration.
pub fn smoothed_next_actions(
    policy: &Policy,
    batch: &Minibatch,
    policy_noise: f64,
    noise_clip: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let (mut actions, _) = policy.act_batch(&batch.next_states, batch.n);
    for a in actions.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        let eps = (z * policy_noise).clamp(-noise_clip, noise_clip);
        *a = (*a + eps).clamp(-policy.max_action, policy.max_action);
    }
    actions
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ActorReport {
    pub loss: f64,
    pub q_mean: f64,
    pub bc_mse: f64,
    pub normalizer: f64,
}

/// TD3+BC actor objective on a batch: maximize the first critic's value,
/// normalized by its mean magnitude, minus a behavioral-cloning penalty.
///
/// The normalizer is treated as a constant (pass `frozen_normalizer` to pin
/// it, e.g. for finite-difference checks). Returns (report, grad).
pub fn actor_loss(
    policy: &Policy,
    ensemble: &CriticEnsemble,
    batch: &Minibatch,
    bc_alpha: f64,
    frozen_normalizer: Option<f64>,
) -> (ActorReport, Vec<f64>) {
    let n = batch.n;
    let (a_pi, actor_cache) = policy.act_batch(&batch.states, n);

    // critic input rows s || pi(s)
    let mut input = Vec::with_capacity(n * (batch.state_dim + batch.action_dim));
    for i in 0..n {
        input.extend_from_slice(&batch.states[i * batch.state_dim..(i + 1) * batch.state_dim]);
        input.extend_from_slice(&a_pi[i * batch.action_dim..(i + 1) * batch.action_dim]);
    }
    let critic = &ensemble.members[0].online;
    let (q, critic_cache) = critic.forward_batch(&input, n);

    let q_mean = q.iter().sum::<f64>() / n as f64;
    let normalizer = frozen_normalizer
        .unwrap_or_else(|| q.iter().map(|v| v.abs()).sum::<f64>() / n as f64)
        .max(1e-12);
    let lam = bc_alpha / normalizer;

    let d = batch.action_dim as f64;
    let mut bc_mse = 0.0;
    for (ap, ad) in a_pi.iter().zip(batch.actions.iter()) {
        bc_mse += (ap - ad) * (ap - ad);
    }
    bc_mse /= n as f64 * d;
    let loss = -lam * q_mean + bc_mse;

    // d loss / d q -> input grads of the critic -> action part
    let grad_q = vec![-lam / n as f64; n];
    let mut scratch = vec![0.0; critic.n_params()];
    let mut input_grads = vec![0.0; input.len()];
    critic.backward(&critic_cache, &grad_q, &mut scratch, Some(&mut input_grads));

    let mut grad_actions = vec![0.0; n * batch.action_dim];
    let row = batch.state_dim + batch.action_dim;
    for i in 0..n {
        for k in 0..batch.action_dim {
            grad_actions[i * batch.action_dim + k] = input_grads[i * row + batch.state_dim + k];
        }
    }
    let bc_scale = 2.0 / (n as f64 * d);
    for (g, (ap, ad)) in grad_actions
        .iter_mut()
        .zip(a_pi.iter().zip(batch.actions.iter()))
    {
        *g += bc_scale * (ap - ad);
    }

    let mut grad = vec![0.0; policy.net.n_params()];
    policy.backward(&actor_cache, &grad_actions, &mut grad);
    (
        ActorReport {
            loss,
            q_mean,
            bc_mse,
            normalizer,
        },
        grad,
    )
}

/// One Adam step on the actor objective.
pub fn update_actor(
    policy: &mut Policy,
    ensemble: &CriticEnsemble,
    batch: &Minibatch,
    bc_alpha: f64,
    opt: &mut Adam,
) -> ActorReport {
    let (report, grad) = actor_loss(policy, ensemble, batch, bc_alpha, None);
    opt.step(policy.net.params_mut(), &grad);
    report
}

/// Polyak averaging of every member's target toward its online network.
pub fn soft_update_targets(ensemble: &mut CriticEnsemble, polyak: f64) {
    for member in ensemble.members.iter_mut() {
        let online = member.online.params().to_vec();
        for (t, o) in member.target.params_mut().iter_mut().zip(online.iter()) {
            *t = (1.0 - polyak) * *t + polyak * *o;
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub rl: f64,
    pub div: f64,
    pub lambda: f64,
}

/// One optimizer step per member on the full critic loss. Targets are shared
/// across members (computed before any member moves).
#[allow(clippy::too_many_arguments)]
pub fn update_critics(
    ensemble: &mut CriticEnsemble,
    nominal_batch: &Minibatch,
    repulsive: Option<(&Minibatch, &[f64])>,
    targets: &[f64],
    lambda: f64,
    cfg: &TrainConfig,
    opts: &mut [Adam],
    step: usize,
) -> Result<LossReport, TrainError> {
    // one member per task: disjoint parameter stores and optimizer states,
    // so parallel execution is bit-identical to the sequential order
    let parts: Vec<Result<CriticLossParts, TrainError>> = ensemble
        .members
        .par_iter_mut()
        .zip(opts.par_iter_mut())
        .map(|(member, opt)| {
            let (parts, grad) = critic_loss(
                &member.online,
                nominal_batch,
                targets,
                repulsive,
                lambda,
                cfg.delta,
                cfg.gamma,
            )?;
            if !parts.total().is_finite() {
                return Err(TrainError::Diverged { step });
            }
            opt.step(member.online.params_mut(), &grad);
            Ok(parts)
        })
        .collect();
    let mut rl_sum = 0.0;
    let mut div_sum = 0.0;
    for p in parts {
        let p = p?;
        rl_sum += p.rl;
        div_sum += p.div;
    }
    let n = ensemble.members.len() as f64;
    Ok(LossReport {
        rl: rl_sum / n,
        div: div_sum / n,
        lambda,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub rl_loss: f64,
    pub div_loss: f64,
    pub lambda: f64,
    pub eval_return: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub rows: Vec<MetricsRow>,
}

impl Metrics {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), TrainError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "step,rl_loss,div_loss,lambda,eval_return")?;
        for r in &self.rows {
            let eval = r
                .eval_return
                .map(|v| v.to_string())
                .unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", r.step, r.rl_loss, r.div_loss, r.lambda, eval)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub struct TrainOutput {
    pub policy: Policy,
    pub ensemble: CriticEnsemble,
    pub metrics: Metrics,
    pub actor_updates: usize,
}

/// Fresh actor and critics for the given environment dimensions.
pub fn init_actor_critic(spec: &EnvSpec, cfg: &TrainConfig) -> Result<(Policy, CriticEnsemble), TrainError> {
    let policy = Policy::init(
        spec.state_dim(),
        spec.action_dim(),
        spec.max_action(),
        &mut stream(cfg.seed, "actor_init", 0),
    );
    let ensemble = init_ensemble(cfg.ensemble_size, spec.state_dim(), spec.action_dim(), cfg.seed)?;
    Ok((policy, ensemble))
}

/// Mean return of the deterministic policy over seeded episodes.
pub fn evaluate_policy(
    policy: &Policy,
    spec: &EnvSpec,
    params: &DomainParams,
    episodes: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for e in 0..episodes {
        let mut env = make_env(spec, params, child_seed(seed, "eval_episode", e as u64))?;
        let mut state = env.reset();
        loop {
            let action = policy.act(&state);
            let out = env.step(&action)?;
            total += out.reward;
            state = out.next_state;
            if out.done {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

struct LoopArgs<'a> {
    nominal: &'a BalancedBuffer,
    repulsive: Option<&'a BalancedBuffer>,
    spec: &'a EnvSpec,
    cfg: &'a TrainConfig,
    warm: Option<(Policy, CriticEnsemble)>,
}

fn run_loop(args: LoopArgs) -> Result<TrainOutput, TrainError> {
    let cfg = args.cfg;
    cfg.validate()?;
    let (mut policy, mut ensemble) = match args.warm {
        Some(pair) => pair,
        None => init_actor_critic(args.spec, cfg)?,
    };
    let mut critic_opts: Vec<Adam> = ensemble
        .members
        .iter()
        .map(|m| Adam::new(m.online.n_params(), cfg.lr))
        .collect();
    let mut actor_opt = Adam::new(policy.net.n_params(), cfg.lr);

    let mut rng_nominal = stream(cfg.seed, "batch_nominal", 0);
    let mut rng_repulsive = stream(cfg.seed, "batch_repulsive", 0);
    let mut rng_target_noise = stream(cfg.seed, "target_noise", 0);
    let mut rng_diversity_noise = stream(cfg.seed, "diversity_noise", 0);

    let mut lambda = 0.0;
    let mut actor_updates = 0usize;
    let mut metrics = Metrics::default();

    for step in 0..cfg.steps {
        let nominal_batch = args.nominal.sample_batch(cfg.batch_size, &mut rng_nominal);
        let targets = td_targets(
            &nominal_batch,
            &policy,
            &ensemble,
            cfg.gamma,
            cfg.policy_noise,
            cfg.noise_clip,
            &mut rng_target_noise,
        );

        let repulsive_batch = args
            .repulsive
            .map(|buf| buf.sample_batch(cfg.batch_size, &mut rng_repulsive));
        let repulsive_next = repulsive_batch.as_ref().map(|rb| {
            smoothed_next_actions(
                &policy,
                rb,
                cfg.policy_noise,
                cfg.noise_clip,
                &mut rng_diversity_noise,
            )
        });
        let repulsive_pair = repulsive_batch
            .as_ref()
            .zip(repulsive_next.as_deref())
            .map(|(rb, na)| (rb, na));

        if cfg.lambda_fraction > 0.0 && step % cfg.lambda_refresh_every == 0 {
            if let Some((rb, na)) = repulsive_pair {
                lambda = refresh_lambda(
                    &ensemble,
                    &nominal_batch,
                    &targets,
                    rb,
                    na,
                    cfg,
                    lambda,
                )?;
            }
        }

        let report = update_critics(
            &mut ensemble,
            &nominal_batch,
            repulsive_pair,
            &targets,
            lambda,
            cfg,
            &mut critic_opts,
            step,
        )?;

        if (step + 1) % cfg.actor_delay == 0 {
            update_actor(&mut policy, &ensemble, &nominal_batch, cfg.bc_alpha, &mut actor_opt);
            soft_update_targets(&mut ensemble, cfg.polyak);
            actor_updates += 1;
        }

        let eval_return = if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            Some(evaluate_policy(
                &policy,
                args.spec,
                &args.spec.nominal_params,
                cfg.eval_episodes,
                child_seed(cfg.seed, "eval", (step + 1) as u64),
            )?)
        } else {
            None
        };

        metrics.rows.push(MetricsRow {
            step,
            rl_loss: report.rl,
            div_loss: report.div,
            lambda: report.lambda,
            eval_return,
        });
    }

    Ok(TrainOutput {
        policy,
        ensemble,
        metrics,
        actor_updates,
    })
}

/// Value-only pass producing the current loss components for the coefficient
/// refresh; consumes no randomness and moves no parameters.
fn refresh_lambda(
    ensemble: &CriticEnsemble,
    nominal_batch: &Minibatch,
    targets: &[f64],
    repulsive_batch: &Minibatch,
    repulsive_next: &[f64],
    cfg: &TrainConfig,
    previous: f64,
) -> Result<f64, TrainError> {
    let sa = nominal_batch.sa_input();
    let pairs: Vec<Result<(f64, f64), EnsembleError>> = ensemble
        .members
        .par_iter()
        .map(|member| {
            let (q, _) = member.online.forward_batch(&sa, nominal_batch.n);
            let rl: f64 = q
                .iter()
                .zip(targets.iter())
                .map(|(qj, yj)| (qj - yj) * (qj - yj))
                .sum::<f64>()
                / nominal_batch.n as f64;
            let div = diversity_value(
                &member.online,
                repulsive_batch,
                repulsive_next,
                cfg.delta,
                cfg.gamma,
            )? / repulsive_batch.n as f64;
            Ok((rl, div))
        })
        .collect();
    let mut rl_sum = 0.0;
    let mut div_sum = 0.0;
    for p in pairs {
        let (rl, div) = p?;
        rl_sum += rl;
        div_sum += div;
    }
    let n = ensemble.members.len() as f64;
    Ok(adaptive_lambda(rl_sum / n, div_sum / n, cfg.lambda_fraction, previous))
}

/// Offline training on a nominal dataset with the diversity term driven by a
/// repulsive dataset.
pub fn train_offline(
    nominal: &Dataset,
    repulsive: &Dataset,
    spec: &EnvSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    nominal.expect_role(Role::Nominal)?;
    repulsive.expect_role(Role::Repulsive)?;
    nominal.validate()?;
    repulsive.validate()?;
    let nominal_buf = BalancedBuffer::uniform(nominal.flatten(), Role::Nominal)?;
    let repulsive_buf = BalancedBuffer::uniform(repulsive.flatten(), Role::Repulsive)?;
    run_loop(LoopArgs {
        nominal: &nominal_buf,
        repulsive: Some(&repulsive_buf),
        spec,
        cfg,
        warm: None,
    })
}

/// Plain TD3+BC backbone: no repulsive data, no diversity term. The training
/// transcript with `lambda_fraction = 0` in `train_offline` must match this
/// bit for bit.
pub fn train_backbone(
    nominal: &Dataset,
    spec: &EnvSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    nominal.expect_role(Role::Nominal)?;
    nominal.validate()?;
    let nominal_buf = BalancedBuffer::uniform(nominal.flatten(), Role::Nominal)?;
    run_loop(LoopArgs {
        nominal: &nominal_buf,
        repulsive: None,
        spec,
        cfg,
        warm: None,
    })
}

/// Fine-tuning continuation: nominal batches drawn weight-proportionally from
/// the balanced buffer, diversity driven by the newest repulsive dataset.
/// Optimizer moments are reset.
pub fn finetune(
    policy: Policy,
    ensemble: CriticEnsemble,
    balanced_nominal: &BalancedBuffer,
    new_repulsive: &Dataset,
    spec: &EnvSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    new_repulsive.expect_role(Role::Repulsive)?;
    new_repulsive.validate()?;
    if balanced_nominal.is_empty() {
        return Err(TrainError::Buffer(BufferError::Empty));
    }
    let repulsive_buf = BalancedBuffer::uniform(new_repulsive.flatten(), Role::Repulsive)?;
    run_loop(LoopArgs {
        nominal: balanced_nominal,
        repulsive: Some(&repulsive_buf),
        spec,
        cfg,
        warm: Some((policy, ensemble)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect_rollouts, PdPointMassPolicy};
    use crate::ensemble::random_batch;
    use crate::envs::{ParamKind, ParamRange};
    use rand::Rng;

    fn small_spec() -> EnvSpec {
        EnvSpec::point_mass(20, DomainParams::new(0.05, 0.0, 1.0))
    }

    fn tiny_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 16,
            ensemble_size: 2,
            eval_every: 0,
            ..Default::default()
        }
    }

    fn datasets() -> (Dataset, Dataset) {
        let spec = small_spec();
        let policy = PdPointMassPolicy::default();
        let nominal_range =
            ParamRange::around(&spec.nominal_params, ParamKind::MassMult, [1.0, 1.0]).unwrap();
        let repulsive_range =
            ParamRange::around(&spec.nominal_params, ParamKind::MassMult, [1.0, 5.0]).unwrap();
        let nominal =
            collect_rollouts(&spec, &nominal_range, &policy, 4, 11, Role::Nominal).unwrap();
        let repulsive =
            collect_rollouts(&spec, &repulsive_range, &policy, 4, 12, Role::Repulsive).unwrap();
        (nominal, repulsive)
    }

    #[test]
    fn td_targets_terminal_and_zero_gamma() {
        let mut rng = stream(0, "tdt", 0);
        let ensemble = init_ensemble(2, 2, 1, 3).unwrap();
        let policy = Policy::init(2, 1, 1.0, &mut rng);
        let mut batch = random_batch(4, 2, 1, Role::Nominal, &mut rng);
        batch.dones = vec![1.0; 4];
        let y = td_targets(&batch, &policy, &ensemble, 0.99, 0.0, 0.5, &mut rng);
        assert_eq!(y, batch.rewards);

        batch.dones = vec![0.0; 4];
        let y = td_targets(&batch, &policy, &ensemble, 0.0, 0.0, 0.5, &mut rng);
        assert_eq!(y, batch.rewards);
    }

    #[test]
    fn td_target_matches_hand_computation() {
        let mut rng = stream(1, "tdt", 0);
        let ensemble = init_ensemble(3, 2, 1, 4).unwrap();
        let policy = Policy::init(2, 1, 1.0, &mut rng);
        let batch = random_batch(1, 2, 1, Role::Nominal, &mut rng);
        let gamma = 0.9;
        // policy_noise = 0 makes the next action deterministic
        let y = td_targets(&batch, &policy, &ensemble, gamma, 0.0, 0.5, &mut rng);

        let a_next = policy.act(&batch.next_states);
        let preds = crate::ensemble::predict_target(&ensemble, &batch.next_states, &a_next).unwrap();
        let min_q = preds.iter().cloned().fold(f64::INFINITY, f64::min);
        let expected = batch.rewards[0] + gamma * (1.0 - batch.dones[0]) * min_q;
        assert!((y[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn soft_update_arithmetic() {
        let mut ensemble = init_ensemble(2, 2, 1, 5).unwrap();
        // force target 0, online 1
        for m in ensemble.members.iter_mut() {
            m.online.params_mut().fill(1.0);
            m.target.params_mut().fill(0.0);
        }
        soft_update_targets(&mut ensemble, 0.5);
        soft_update_targets(&mut ensemble, 0.5);
        for m in &ensemble.members {
            for p in m.target.params() {
                assert!((p - 0.75).abs() < 1e-15);
            }
        }

        let mut ensemble = init_ensemble(2, 2, 1, 6).unwrap();
        let before: Vec<Vec<f64>> = ensemble.members.iter().map(|m| m.online.params().to_vec()).collect();
        soft_update_targets(&mut ensemble, 1.0);
        for (m, b) in ensemble.members.iter().zip(before.iter()) {
            assert_eq!(m.target.params(), b.as_slice());
        }
    }

    #[test]
    fn zero_polyak_rejected_by_config() {
        let cfg = TrainConfig {
            polyak: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn actor_output_always_inside_box() {
        let mut rng = stream(2, "act", 0);
        for _ in 0..20 {
            let mut policy = Policy::init(3, 2, 1.5, &mut rng);
            // exaggerate parameters to push tanh toward saturation
            for p in policy.net.params_mut().iter_mut() {
                *p *= 50.0;
            }
            let s: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect();
            for a in policy.act(&s) {
                assert!(a.abs() <= 1.5);
            }
        }
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = stream(3, "act-fd", 0);
        let ensemble = init_ensemble(2, 2, 1, 9).unwrap();
        let mut policy = Policy::init(2, 1, 1.0, &mut rng);
        let batch = random_batch(5, 2, 1, Role::Nominal, &mut rng);

        let (report, analytic) = actor_loss(&policy, &ensemble, &batch, 2.5, None);
        let frozen = report.normalizer;
        let h = 1e-6;
        for i in (0..policy.net.n_params()).step_by(13) {
            let orig = policy.net.params()[i];
            policy.net.params_mut()[i] = orig + h;
            let (rp, _) = actor_loss(&policy, &ensemble, &batch, 2.5, Some(frozen));
            policy.net.params_mut()[i] = orig - h;
            let (rm, _) = actor_loss(&policy, &ensemble, &batch, 2.5, Some(frozen));
            policy.net.params_mut()[i] = orig;
            let fd = (rp.loss - rm.loss) / (2.0 * h);
            let tol = 1e-6 + 1e-4 * analytic[i].abs().max(fd.abs());
            assert!((analytic[i] - fd).abs() <= tol, "param {i}");
        }
    }

    #[test]
    fn cloned_actions_and_flat_critic_give_zero_gradient() {
        let mut rng = stream(4, "flat", 0);
        let mut ensemble = init_ensemble(2, 2, 1, 10).unwrap();
        // flat critic: constant output
        for m in ensemble.members.iter_mut() {
            m.online.params_mut().fill(0.0);
            let n = m.online.n_params();
            m.online.params_mut()[n - 1] = 3.0;
        }
        let policy = Policy::init(2, 1, 1.0, &mut rng);
        let mut batch = random_batch(6, 2, 1, Role::Nominal, &mut rng);
        let (a_pi, _) = policy.act_batch(&batch.states, batch.n);
        batch.actions = a_pi; // behavior actions equal the policy's
        let (report, grad) = actor_loss(&policy, &ensemble, &batch, 2.5, None);
        assert_eq!(report.bc_mse, 0.0);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn training_is_deterministic() {
        let (nominal, repulsive) = datasets();
        let cfg = tiny_cfg(30);
        let a = train_offline(&nominal, &repulsive, &small_spec(), &cfg).unwrap();
        let b = train_offline(&nominal, &repulsive, &small_spec(), &cfg).unwrap();
        assert_eq!(a.policy.net.params(), b.policy.net.params());
        for (ma, mb) in a.ensemble.members.iter().zip(&b.ensemble.members) {
            assert_eq!(ma.online.params(), mb.online.params());
            assert_eq!(ma.target.params(), mb.target.params());
        }
        let ra: Vec<f64> = a.metrics.rows.iter().map(|r| r.rl_loss).collect();
        let rb: Vec<f64> = b.metrics.rows.iter().map(|r| r.rl_loss).collect();
        assert_eq!(ra, rb);
    }

    #[test]
    fn actor_update_count_and_metrics_rows() {
        let (nominal, repulsive) = datasets();
        let cfg = tiny_cfg(100);
        let out = train_offline(&nominal, &repulsive, &small_spec(), &cfg).unwrap();
        assert_eq!(out.actor_updates, 50);
        assert_eq!(out.metrics.rows.len(), 100);
    }

    #[test]
    fn role_mismatch_is_rejected() {
        let (nominal, repulsive) = datasets();
        let cfg = tiny_cfg(5);
        assert!(train_offline(&repulsive, &nominal, &small_spec(), &cfg).is_err());
    }

    #[test]
    fn lambda_zero_report_has_zero_diversity_contribution() {
        let (nominal, repulsive) = datasets();
        let cfg = TrainConfig {
            lambda_fraction: 0.0,
            ..tiny_cfg(10)
        };
        let out = train_offline(&nominal, &repulsive, &small_spec(), &cfg).unwrap();
        for row in &out.metrics.rows {
            assert_eq!(row.lambda, 0.0);
            assert_eq!(row.lambda * row.div_loss, 0.0);
        }
    }

    #[test]
    fn single_full_batch_step_descends() {
        let mut rng = stream(7, "descent", 0);
        let (nominal, _) = datasets();
        let spec = small_spec();
        let cfg = TrainConfig {
            lr: 1e-3,
            ..tiny_cfg(1)
        };
        let (policy, mut ensemble) = init_actor_critic(&spec, &cfg).unwrap();
        let flat = nominal.flatten();
        let refs: Vec<&crate::data::Transition> = flat.iter().collect();
        let batch = Minibatch::from_transitions(&refs, Role::Nominal).unwrap();
        let targets = td_targets(&batch, &policy, &ensemble, cfg.gamma, 0.0, 0.5, &mut rng);

        let loss_of = |e: &CriticEnsemble| -> f64 {
            let (q, _) = e.members[0].online.forward_batch(&batch.sa_input(), batch.n);
            q.iter()
                .zip(&targets)
                .map(|(qj, yj)| (qj - yj) * (qj - yj))
                .sum::<f64>()
                / batch.n as f64
        };
        let before = loss_of(&ensemble);
        let mut opts: Vec<Adam> = ensemble
            .members
            .iter()
            .map(|m| Adam::new(m.online.n_params(), cfg.lr))
            .collect();
        update_critics(&mut ensemble, &batch, None, &targets, 0.0, &cfg, &mut opts, 0).unwrap();
        let after = loss_of(&ensemble);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn critic_loss_non_increasing_over_full_batch_steps() {
        // plain full-batch gradient steps at lr 1e-3 on frozen targets:
        // the TD loss must descend monotonically
        let mut rng = stream(8, "descent-long", 0);
        let (nominal, _) = datasets();
        let spec = small_spec();
        let cfg = tiny_cfg(1);
        let (policy, mut ensemble) = init_actor_critic(&spec, &cfg).unwrap();
        let flat = nominal.flatten();
        let refs: Vec<&crate::data::Transition> = flat.iter().collect();
        let batch = Minibatch::from_transitions(&refs, Role::Nominal).unwrap();
        let targets = td_targets(&batch, &policy, &ensemble, cfg.gamma, 0.0, 0.5, &mut rng);

        let lr = 1e-3;
        let mut prev = f64::INFINITY;
        for step in 0..100 {
            let mut rl_sum = 0.0;
            for member in ensemble.members.iter_mut() {
                let (parts, grad) =
                    critic_loss(&member.online, &batch, &targets, None, 0.0, cfg.delta, cfg.gamma)
                        .unwrap();
                rl_sum += parts.rl;
                for (p, g) in member.online.params_mut().iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
            let rl = rl_sum / ensemble.members.len() as f64;
            assert!(rl <= prev, "step {step}: {rl} > {prev}");
            prev = rl;
        }
    }

    #[test]
    fn finetune_with_uniform_weights_reduces_to_train_offline() {
        let (nominal, repulsive) = datasets();
        let spec = small_spec();
        let cfg = tiny_cfg(25);

        let offline = train_offline(&nominal, &repulsive, &spec, &cfg).unwrap();

        let (policy0, ensemble0) = init_actor_critic(&spec, &cfg).unwrap();
        let buffer = BalancedBuffer::uniform(nominal.flatten(), Role::Nominal).unwrap();
        let warm = finetune(policy0, ensemble0, &buffer, &repulsive, &spec, &cfg).unwrap();

        assert_eq!(offline.policy.net.params(), warm.policy.net.params());
        for (a, b) in offline.ensemble.members.iter().zip(&warm.ensemble.members) {
            assert_eq!(a.online.params(), b.online.params());
        }
    }

    #[test]
    fn finetune_changes_parameters() {
        let (nominal, repulsive) = datasets();
        let spec = small_spec();
        let cfg = tiny_cfg(10);
        let (policy0, ensemble0) = init_actor_critic(&spec, &cfg).unwrap();
        let before = policy0.net.params().to_vec();
        let buffer = BalancedBuffer::uniform(nominal.flatten(), Role::Nominal).unwrap();
        let out = finetune(policy0, ensemble0, &buffer, &repulsive, &spec, &cfg).unwrap();
        assert_ne!(out.policy.net.params(), before.as_slice());
    }
}
