//! Iterative randomization orchestrator: expand the randomized range, collect
//! repulsive data with the current policy, fine-tune on the
//! uncertainty-balanced pool, and gate deployment on the target proxy's
//! critic variance. Stops at deployment or when the schedule is exhausted.

use std::cell::Cell;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    evaluate_policy, finetune, train_offline, ActorRolloutPolicy, Policy, TrainConfig, TrainError,
};
use crate::buffer::{merge_balanced, BufferError};
use crate::data::{
    collect_rollouts, scripted_behavior_policy, save_dataset, DataError, Dataset, Role,
};
use crate::ensemble::CriticEnsemble;
use crate::envs::{
    expand_range, DomainParams, EnvError, EnvSpec, ParamKind, ParamRange,
};
use crate::gate::{episode_mean_variances, gate_decision, GateConfig, GateDecision, GateError, GateReport};
use crate::rng::child_seed;

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("schedule must have at least 2 entries (nominal plus first repulsive), got {0}")]
    ScheduleTooShort(usize),
    #[error("target proxy dataset must have role target_proxy, got {0:?}")]
    WrongTargetRole(Role),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Episode counts and the collection seed for one curriculum run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub nominal_episodes: usize,
    pub repulsive_episodes: usize,
    pub target_episodes: usize,
    pub id_calibration_episodes: usize,
    pub collect_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            nominal_episodes: 200,
            repulsive_episodes: 200,
            target_episodes: 40,
            id_calibration_episodes: 100,
            collect_seed: 0,
        }
    }
}

/// Access record for the target proxy. The training path has no accessor, so
/// `training_reads` is zero by construction; role checks in the trainers give
/// a second, runtime layer.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AccessAudit {
    pub gate_reads: usize,
    pub report_reads: usize,
    pub training_reads: usize,
}

/// The target-proxy dataset behind an audited facade: readable by the gate
/// and by reporting, never by training.
pub struct TargetProxy {
    dataset: Dataset,
    gate_reads: Cell<usize>,
    report_reads: Cell<usize>,
}

impl TargetProxy {
    pub fn new(dataset: Dataset) -> Result<Self, CurriculumError> {
        if dataset.role != Role::TargetProxy {
            return Err(CurriculumError::WrongTargetRole(dataset.role));
        }
        dataset.validate()?;
        Ok(Self {
            dataset,
            gate_reads: Cell::new(0),
            report_reads: Cell::new(0),
        })
    }

    /// Read access for gate evaluation.
    pub fn for_gate(&self) -> &Dataset {
        self.gate_reads.set(self.gate_reads.get() + 1);
        &self.dataset
    }

    /// Read access for report emission.
    pub fn for_report(&self) -> &Dataset {
        self.report_reads.set(self.report_reads.get() + 1);
        &self.dataset
    }

    pub fn audit(&self) -> AccessAudit {
        AccessAudit {
            gate_reads: self.gate_reads.get(),
            report_reads: self.report_reads.get(),
            training_reads: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumStatus {
    Running,
    Deployed,
    BudgetExhausted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub sigma2_mean: f64,
    pub tau: f64,
    pub decision: GateDecision,
    /// Reporting-only return at the (withheld) target parameters; never used
    /// for training.
    pub eval_return_at_target: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurriculumState {
    pub iteration: usize,
    pub nominal_range: ParamRange,
    pub repulsive_range: ParamRange,
    pub status: CurriculumStatus,
    pub gate_history: Vec<GateReport>,
    pub rows: Vec<IterationRow>,
    pub audit: AccessAudit,
}

pub struct CurriculumOutcome {
    pub state: CurriculumState,
    pub policy: Policy,
    pub ensemble: CriticEnsemble,
    /// D_0, D_1, ... in collection order, with their roles at run end.
    pub datasets: Vec<Dataset>,
}

pub struct CurriculumArgs<'a> {
    pub env_spec: &'a EnvSpec,
    pub active_param: ParamKind,
    pub schedule: &'a [[f64; 2]],
    pub target: &'a TargetProxy,
    pub gate_config: &'a GateConfig,
    pub train_config: &'a TrainConfig,
    pub data_config: &'a DataConfig,
    /// When set, each iteration row records the deterministic policy return
    /// at these parameters, for trend reporting only.
    pub report_phi_t: Option<DomainParams>,
    /// Cap on fine-tuning iterations; defaults to the schedule length.
    pub max_iters: Option<usize>,
    /// Record the gate but keep expanding to the end of the schedule even
    /// after a deploy verdict (the protocol used for variance/return trend
    /// studies).
    pub full_schedule: bool,
    pub out_dir: Option<&'a Path>,
}

/// Per-episode mean critic variances over fresh in-distribution rollouts of
/// the behavior policy on the current nominal range.
fn id_calibration_variances(
    ensemble: &CriticEnsemble,
    spec: &EnvSpec,
    range: &ParamRange,
    data_cfg: &DataConfig,
    iteration: usize,
) -> Result<(Vec<f64>, Dataset), CurriculumError> {
    let behavior = scripted_behavior_policy(spec)?;
    let dataset = collect_rollouts(
        spec,
        range,
        behavior.as_ref(),
        data_cfg.id_calibration_episodes,
        child_seed(data_cfg.collect_seed, "id_calibration", iteration as u64),
        Role::Nominal,
    )?;
    let vars = episode_mean_variances(ensemble, &dataset)?;
    Ok((vars, dataset))
}

pub fn run_curriculum(args: CurriculumArgs) -> Result<CurriculumOutcome, CurriculumError> {
    let CurriculumArgs {
        env_spec,
        active_param,
        schedule,
        target,
        gate_config,
        train_config,
        data_config,
        report_phi_t,
        max_iters,
        full_schedule,
        out_dir,
    } = args;
    if schedule.len() < 2 {
        return Err(CurriculumError::ScheduleTooShort(schedule.len()));
    }
    let max_iters = max_iters.unwrap_or(schedule.len());

    let mut nominal_range =
        ParamRange::around(&env_spec.nominal_params, active_param, schedule[0])?;
    let mut repulsive_range = expand_range(&nominal_range, schedule, 1)?;

    let behavior = scripted_behavior_policy(env_spec)?;
    let d0 = collect_rollouts(
        env_spec,
        &nominal_range,
        behavior.as_ref(),
        data_config.nominal_episodes,
        child_seed(data_config.collect_seed, "dataset", 0),
        Role::Nominal,
    )?;
    let d1 = collect_rollouts(
        env_spec,
        &repulsive_range,
        behavior.as_ref(),
        data_config.repulsive_episodes,
        child_seed(data_config.collect_seed, "dataset", 1),
        Role::Repulsive,
    )?;

    let trained = train_offline(&d0, &d1, env_spec, train_config)?;
    let mut policy = trained.policy;
    let mut ensemble = trained.ensemble;
    let mut registry: Vec<Dataset> = vec![d0, d1];

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("datasets"))?;
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::create_dir_all(dir.join("reports"))?;
        save_dataset(&registry[0], &dir.join("datasets/d0.jsonl"))?;
        save_dataset(&registry[1], &dir.join("datasets/d1.jsonl"))?;
        save_dataset(target.for_report(), &dir.join("datasets/target_proxy.jsonl"))?;
        write_checkpoint(dir, 0, &policy, &ensemble)?;
        trained.metrics.write_csv(&dir.join("reports/metrics_train.csv"))?;
    }

    let mut state = CurriculumState {
        iteration: 0,
        nominal_range,
        repulsive_range,
        status: CurriculumStatus::Running,
        gate_history: Vec::new(),
        rows: Vec::new(),
        audit: AccessAudit::default(),
    };

    for iteration in 0.. {
        let (id_vars, _) =
            id_calibration_variances(&ensemble, env_spec, &nominal_range, data_config, iteration)?;
        let report = gate_decision(&ensemble, target.for_gate(), gate_config, &id_vars)?;
        let eval_return_at_target = match report_phi_t {
            Some(phi_t) => Some(evaluate_policy(
                &policy,
                env_spec,
                &phi_t,
                5,
                child_seed(train_config.seed, "target_eval", iteration as u64),
            )?),
            None => None,
        };
        state.rows.push(IterationRow {
            iteration,
            sigma2_mean: report.sigma2_mean,
            tau: report.tau,
            decision: report.decision,
            eval_return_at_target,
        });
        if let Some(dir) = out_dir {
            write_gate_report(dir, iteration, &report, &id_vars)?;
        }
        let deployed = report.decision == GateDecision::Deploy;
        state.gate_history.push(report);
        state.iteration = iteration;

        if deployed && !full_schedule {
            state.status = CurriculumStatus::Deployed;
            break;
        }

        let next_schedule_index = iteration + 2;
        if next_schedule_index >= schedule.len() || iteration >= max_iters {
            state.status = if deployed {
                CurriculumStatus::Deployed
            } else {
                eprintln!(
                    "randomization budget exhausted with critic variance still above the gate \
                     threshold: the policy has not generalized to the target-domain conditions; \
                     revisit the randomization schedule or the target dataset"
                );
                CurriculumStatus::BudgetExhausted
            };
            break;
        }

        // expand, collect with the current policy, absorb the previous
        // repulsive set into the nominal pool, fine-tune
        let new_repulsive_range = expand_range(&repulsive_range, schedule, next_schedule_index)?;
        let rollout_policy = ActorRolloutPolicy {
            policy: policy.clone(),
            noise_sigma: train_config.exploration_noise,
            label: format!("pi_{iteration}"),
        };
        let d_new = collect_rollouts(
            env_spec,
            &new_repulsive_range,
            &rollout_policy,
            data_config.repulsive_episodes,
            child_seed(data_config.collect_seed, "dataset", next_schedule_index as u64),
            Role::Repulsive,
        )?;
        if let Some(dir) = out_dir {
            save_dataset(
                &d_new,
                &dir.join(format!("datasets/d{next_schedule_index}.jsonl")),
            )?;
        }

        for d in registry.iter_mut() {
            if d.role == Role::Repulsive {
                *d = d.with_role(Role::Nominal);
            }
        }
        let refs: Vec<&Dataset> = registry.iter().collect();
        let buffer = merge_balanced(&refs, &ensemble)?;

        let mut ft_cfg = train_config.clone();
        ft_cfg.seed = child_seed(train_config.seed, "finetune", iteration as u64);
        if let Some(steps) = train_config.finetune_steps {
            ft_cfg.steps = steps;
        }
        let tuned = finetune(policy, ensemble, &buffer, &d_new, env_spec, &ft_cfg)?;
        policy = tuned.policy;
        ensemble = tuned.ensemble;

        nominal_range = repulsive_range;
        repulsive_range = new_repulsive_range;
        state.nominal_range = nominal_range;
        state.repulsive_range = repulsive_range;
        registry.push(d_new);

        if let Some(dir) = out_dir {
            write_checkpoint(dir, iteration + 1, &policy, &ensemble)?;
            tuned
                .metrics
                .write_csv(&dir.join(format!("reports/metrics_finetune_{iteration}.csv")))?;
        }
    }

    state.audit = target.audit();
    if let Some(dir) = out_dir {
        write_summary_csv(&state, &dir.join("reports/summary.csv"))?;
        let json = serde_json::to_string_pretty(&state).expect("state serializes");
        fs::write(dir.join("reports/curriculum_state.json"), json)?;
    }
    Ok(CurriculumOutcome {
        state,
        policy,
        ensemble,
        datasets: registry,
    })
}

/// Per-iteration report rows.
pub fn iteration_summary(state: &CurriculumState) -> &[IterationRow] {
    &state.rows
}

pub fn write_summary_csv(state: &CurriculumState, path: &Path) -> Result<(), std::io::Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "iteration,sigma2_mean,tau,decision,eval_return_at_target")?;
    for r in &state.rows {
        let decision = match r.decision {
            GateDecision::Deploy => "deploy",
            GateDecision::Continue => "continue",
        };
        let ret = r
            .eval_return_at_target
            .map(|v| v.to_string())
            .unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{}",
            r.iteration, r.sigma2_mean, r.tau, decision, ret
        )?;
    }
    w.flush()
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub policy: Policy,
    pub ensemble: CriticEnsemble,
}

fn write_checkpoint(
    dir: &Path,
    index: usize,
    policy: &Policy,
    ensemble: &CriticEnsemble,
) -> Result<(), std::io::Error> {
    let path = dir.join(format!("checkpoints/checkpoint_{index}.json"));
    let payload = serde_json::json!({
        "policy": policy,
        "ensemble": ensemble,
    });
    fs::write(path, serde_json::to_string(&payload).expect("checkpoint serializes"))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, std::io::Error> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Persisted gate record: the decision report plus the per-episode ID
/// calibration variances the threshold came from.
#[derive(Serialize, Deserialize)]
pub struct GateRecord {
    pub report: GateReport,
    pub id_variances: Vec<f64>,
}

fn write_gate_report(
    dir: &Path,
    iteration: usize,
    report: &GateReport,
    id_variances: &[f64],
) -> Result<(), std::io::Error> {
    let record = GateRecord {
        report: report.clone(),
        id_variances: id_variances.to_vec(),
    };
    let path = dir.join(format!("reports/gate_{iteration}.json"));
    fs::write(
        path,
        serde_json::to_string_pretty(&record).expect("report serializes"),
    )
}
