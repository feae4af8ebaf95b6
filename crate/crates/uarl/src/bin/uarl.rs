//! Experiment runner: collection, training, fine-tuning, gating, the full
//! curriculum, the verification oracle, and report emission.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime error, 3 failed
//! certificate.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use uarl::agent::{finetune, train_offline};
use uarl::buffer::merge_balanced;
use uarl::config::{load_config, ExperimentConfig};
use uarl::curriculum::{
    load_checkpoint, run_curriculum, Checkpoint, CurriculumArgs, DataConfig, TargetProxy,
};
use uarl::data::{collect_rollouts, load_dataset, save_dataset, scripted_behavior_policy, Role};
use uarl::envs::ParamRange;
use uarl::gate::{episode_mean_variances, gate_decision};
use uarl::oracle;
use uarl::report::report;

#[derive(Parser)]
#[command(name = "uarl", version, about = "uncertainty-gated domain-randomization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Master seed override (applied to train.seed and data.collect_seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect a dataset with the scripted behavior policy.
    Collect {
        #[command(flatten)]
        common: ConfigArg,
        /// Dataset role: nominal, repulsive, or target.
        #[arg(long)]
        role: String,
        /// Schedule entry to draw the randomization range from (repulsive).
        #[arg(long, default_value_t = 1)]
        schedule_index: usize,
        /// Episode count override.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline training on saved nominal and repulsive datasets.
    Train {
        #[command(flatten)]
        common: ConfigArg,
        #[arg(long)]
        nominal: PathBuf,
        #[arg(long)]
        repulsive: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fine-tune a checkpoint on a balanced pool plus a new repulsive set.
    Finetune {
        #[command(flatten)]
        common: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Nominal-pool datasets (absorbed sets must already be re-tagged).
        #[arg(long, num_args = 1.., required = true)]
        nominal: Vec<PathBuf>,
        #[arg(long)]
        repulsive: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Gate a checkpoint against a target-proxy dataset.
    Gate {
        #[command(flatten)]
        common: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Optional saved ID dataset; fresh calibration rollouts otherwise.
        #[arg(long)]
        id_dataset: Option<PathBuf>,
    },
    /// Run the full curriculum from the config.
    Curriculum {
        #[command(flatten)]
        common: ConfigArg,
        /// Keep expanding to the end of the schedule even after a deploy
        /// verdict (trend-study protocol).
        #[arg(long)]
        full_schedule: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run verification certificates; exits 3 on any counterexample.
    Oracle {
        /// One of critic_gap, value_error, operator_perturbation,
        /// bias_reduction, fitted_q, or all.
        #[arg(long, default_value = "all")]
        check: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Certificate JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the summary bundle and acceptance sheet for a finished run.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn load(common: &ConfigArg) -> Result<ExperimentConfig> {
    let mut config = load_config(&common.config)
        .map_err(|e| anyhow!("{e}"))
        .context("config rejected")?;
    if let Some(seed) = common.seed {
        config.train.seed = seed;
        config.data.collect_seed = seed;
    }
    Ok(config)
}

fn write_manifest(dir: &Path, config_path: &Path, config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let bytes = fs::read(config_path)?;
    let digest = format!("{:x}", Sha256::digest(&bytes));
    let manifest = serde_json::json!({
        "config_digest": digest,
        "config_path": config_path.display().to_string(),
        "train_seed": config.train.seed,
        "collect_seed": config.data.collect_seed,
        "package_version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn range_for(config: &ExperimentConfig, index: usize) -> Result<ParamRange> {
    let entry = *config
        .env
        .schedule
        .get(index)
        .ok_or_else(|| anyhow!("schedule has no entry {index}"))?;
    Ok(ParamRange::around(
        &config.env.spec.nominal_params,
        config.env.active_param,
        entry,
    )?)
}

fn cmd_collect(
    common: &ConfigArg,
    role: &str,
    schedule_index: usize,
    episodes: Option<usize>,
    out: &Path,
) -> Result<u8> {
    let config = load(common)?;
    let spec = &config.env.spec;
    let data: &DataConfig = &config.data;
    let (range, n, role) = match role {
        "nominal" => (range_for(&config, 0)?, data.nominal_episodes, Role::Nominal),
        "repulsive" => (
            range_for(&config, schedule_index)?,
            data.repulsive_episodes,
            Role::Repulsive,
        ),
        "target" => {
            let phi = config
                .target_phi
                .ok_or_else(|| anyhow!("config has no target_phi for target collection"))?;
            let range = ParamRange::around(
                &phi,
                config.env.active_param,
                [phi.get(config.env.active_param); 2],
            )?;
            (range, data.target_episodes, Role::TargetProxy)
        }
        other => return Err(anyhow!("unknown role `{other}` (usage)")),
    };
    let n = episodes.unwrap_or(n);
    let policy = scripted_behavior_policy(spec)?;
    let dataset = collect_rollouts(spec, &range, policy.as_ref(), n, data.collect_seed, role)?;
    save_dataset(&dataset, out)?;
    println!(
        "collected {} episodes ({} transitions) with role {:?} -> {}",
        dataset.n_episodes(),
        dataset.n_transitions(),
        dataset.role,
        out.display()
    );
    Ok(0)
}

fn save_checkpoint(path: &Path, policy: &uarl::agent::Policy, ensemble: &uarl::ensemble::CriticEnsemble) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let payload = serde_json::json!({ "policy": policy, "ensemble": ensemble });
    fs::write(path, serde_json::to_string(&payload)?)?;
    Ok(())
}

fn cmd_train(common: &ConfigArg, nominal: &Path, repulsive: &Path, out_dir: &Path) -> Result<u8> {
    let config = load(common)?;
    let nominal = load_dataset(nominal)?;
    let repulsive = load_dataset(repulsive)?;
    let out = train_offline(&nominal, &repulsive, &config.env.spec, &config.train)?;
    fs::create_dir_all(out_dir)?;
    write_manifest(out_dir, &common.config, &config)?;
    out.metrics.write_csv(&out_dir.join("metrics.csv"))?;
    save_checkpoint(&out_dir.join("checkpoint.json"), &out.policy, &out.ensemble)?;
    println!(
        "trained {} steps ({} actor updates) -> {}",
        config.train.steps,
        out.actor_updates,
        out_dir.display()
    );
    Ok(0)
}

fn cmd_finetune(
    common: &ConfigArg,
    checkpoint: &Path,
    nominal: &[PathBuf],
    repulsive: &Path,
    out_dir: &Path,
) -> Result<u8> {
    let config = load(common)?;
    let Checkpoint { policy, ensemble } = load_checkpoint(checkpoint)?;
    let pool: Vec<_> = nominal
        .iter()
        .map(|p| load_dataset(p))
        .collect::<Result<_, _>>()?;
    let refs: Vec<_> = pool.iter().collect();
    let buffer = merge_balanced(&refs, &ensemble)?;
    let new_repulsive = load_dataset(repulsive)?;
    let out = finetune(
        policy,
        ensemble,
        &buffer,
        &new_repulsive,
        &config.env.spec,
        &config.train,
    )?;
    fs::create_dir_all(out_dir)?;
    write_manifest(out_dir, &common.config, &config)?;
    out.metrics.write_csv(&out_dir.join("metrics.csv"))?;
    save_checkpoint(&out_dir.join("checkpoint.json"), &out.policy, &out.ensemble)?;
    println!("fine-tuned {} steps -> {}", config.train.steps, out_dir.display());
    Ok(0)
}

fn cmd_gate(
    common: &ConfigArg,
    checkpoint: &Path,
    target: &Path,
    id_dataset: Option<&PathBuf>,
) -> Result<u8> {
    let config = load(common)?;
    let Checkpoint { ensemble, .. } = load_checkpoint(checkpoint)?;
    let target = TargetProxy::new(load_dataset(target)?)?;
    let id_vars = match id_dataset {
        Some(path) => episode_mean_variances(&ensemble, &load_dataset(path)?)?,
        None => {
            let policy = scripted_behavior_policy(&config.env.spec)?;
            let range = range_for(&config, 0)?;
            let id_data = collect_rollouts(
                &config.env.spec,
                &range,
                policy.as_ref(),
                config.data.id_calibration_episodes,
                config.data.collect_seed,
                Role::Nominal,
            )?;
            episode_mean_variances(&ensemble, &id_data)?
        }
    };
    let report = gate_decision(&ensemble, target.for_gate(), &config.gate, &id_vars)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}

fn cmd_curriculum(common: &ConfigArg, full_schedule: bool, out_dir: Option<&PathBuf>) -> Result<u8> {
    let config = load(common)?;
    let spec = &config.env.spec;
    let out_dir = out_dir
        .cloned()
        .unwrap_or_else(|| config.resolved_output_dir());
    fs::create_dir_all(&out_dir)?;
    write_manifest(&out_dir, &common.config, &config)?;

    let phi_t = config
        .target_phi
        .ok_or_else(|| anyhow!("config has no target_phi to collect the proxy dataset at"))?;
    let target_range = ParamRange::around(
        &phi_t,
        config.env.active_param,
        [phi_t.get(config.env.active_param); 2],
    )?;
    let behavior = scripted_behavior_policy(spec)?;
    let proxy = collect_rollouts(
        spec,
        &target_range,
        behavior.as_ref(),
        config.data.target_episodes,
        uarl::rng::child_seed(config.data.collect_seed, "target_proxy", 0),
        Role::TargetProxy,
    )?;
    let target = TargetProxy::new(proxy)?;

    let outcome = run_curriculum(CurriculumArgs {
        env_spec: spec,
        active_param: config.env.active_param,
        schedule: &config.env.schedule,
        target: &target,
        gate_config: &config.gate,
        train_config: &config.train,
        data_config: &config.data,
        report_phi_t: Some(phi_t),
        max_iters: config.max_iters,
        full_schedule: full_schedule || config.full_schedule,
        out_dir: Some(&out_dir),
    })?;

    println!(
        "curriculum finished with status {:?} after {} gate evaluations -> {}",
        outcome.state.status,
        outcome.state.rows.len(),
        out_dir.display()
    );
    for row in &outcome.state.rows {
        println!(
            "  iteration {}: sigma2_mean {:.6} tau {:.6} decision {:?}",
            row.iteration, row.sigma2_mean, row.tau, row.decision
        );
    }
    Ok(0)
}

fn cmd_oracle(check: &str, trials: usize, seed: u64, out: Option<&PathBuf>) -> Result<u8> {
    let mut certificates = Vec::new();
    let sweeps: Vec<&str> = match check {
        "all" => vec![
            "critic_gap",
            "value_error",
            "operator_perturbation",
            "bias_reduction",
            "fitted_q",
        ],
        one => vec![one],
    };
    for name in sweeps {
        match name {
            "critic_gap" | "value_error" | "operator_perturbation" => {
                certificates.extend(oracle::run_certificate_sweep(name, trials, seed)?);
            }
            "bias_reduction" => {
                let mut rng = uarl::rng::stream(seed, "bias_sweep", 0);
                for _ in 0..trials.min(50).max(1) {
                    let (samples, phi_t) = oracle::bias_reduction_construction(&mut rng);
                    certificates.push(oracle::check_bias_reduction(&samples, phi_t)?);
                }
            }
            "fitted_q" => {
                let scenario = oracle::mode_switch_scenario();
                let weights = oracle::eq7_weights(&scenario.sigma2, &scenario.roles)?;
                let weighted = oracle::weighted_fitted_q(
                    &oracle::mode_switch_family,
                    &scenario.samples,
                    &weights,
                    scenario.phi_t,
                    200,
                )?;
                let uniform = oracle::weighted_fitted_q(
                    &oracle::mode_switch_family,
                    &scenario.samples,
                    &vec![1.0; scenario.samples.len()],
                    scenario.phi_t,
                    200,
                )?;
                let holds = weighted.suboptimality <= uniform.suboptimality + 1e-10;
                certificates.push(uarl::oracle::Certificate {
                    check: "fitted_q_weighted_vs_uniform".into(),
                    inputs_digest: oracle::digest_inputs(&["mode_switch_scenario"]),
                    lhs: weighted.suboptimality,
                    rhs: uniform.suboptimality,
                    holds: Some(holds),
                    details: serde_json::json!({
                        "phi_t": scenario.phi_t,
                        "weighted_policy": weighted.policy,
                        "uniform_policy": uniform.policy,
                    }),
                    counterexample: None,
                });
            }
            other => return Err(anyhow!("unknown check `{other}` (usage)")),
        }
    }

    let violations = certificates.iter().filter(|c| c.violated()).count();
    let skipped = certificates.iter().filter(|c| c.holds.is_none()).count();
    for c in &certificates {
        let status = match c.holds {
            Some(true) => "holds",
            Some(false) => "VIOLATED",
            None => "skipped",
        };
        println!(
            "{:<28} lhs {:>12.6} rhs {:>12.6} {}",
            c.check, c.lhs, c.rhs, status
        );
    }
    println!(
        "{} certificates, {} violations, {} skipped",
        certificates.len(),
        violations,
        skipped
    );
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(&certificates)?)?;
    }
    Ok(if violations > 0 { 3 } else { 0 })
}

fn cmd_report(run_dir: &Path) -> Result<u8> {
    let bundle = report(run_dir)?;
    println!("run status: {:?}", bundle.state.status);
    for entry in &bundle.acceptance {
        println!(
            "  [{:>2}] {:<36} {:?}{}",
            entry.id,
            entry.slug,
            entry.status,
            entry
                .detail
                .as_ref()
                .map(|d| format!(" ({d})"))
                .unwrap_or_default()
        );
    }
    for f in &bundle.files {
        println!("wrote {}", f.display());
    }
    let failed = bundle
        .acceptance
        .iter()
        .any(|e| e.status == uarl::report::CriterionStatus::Fail);
    Ok(if failed { 3 } else { 0 })
}

fn dispatch(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Collect {
            common,
            role,
            schedule_index,
            episodes,
            out,
        } => cmd_collect(common, role, *schedule_index, *episodes, out),
        Command::Train {
            common,
            nominal,
            repulsive,
            out_dir,
        } => cmd_train(common, nominal, repulsive, out_dir),
        Command::Finetune {
            common,
            checkpoint,
            nominal,
            repulsive,
            out_dir,
        } => cmd_finetune(common, checkpoint, nominal, repulsive, out_dir),
        Command::Gate {
            common,
            checkpoint,
            target,
            id_dataset,
        } => cmd_gate(common, checkpoint, target, id_dataset.as_ref()),
        Command::Curriculum {
            common,
            full_schedule,
            out_dir,
        } => cmd_curriculum(common, *full_schedule, out_dir.as_ref()),
        Command::Oracle {
            check,
            trials,
            seed,
            out,
        } => cmd_oracle(check, *trials, *seed, out.as_ref()),
        Command::Report { run_dir } => cmd_report(run_dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own help/version output through the error
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let msg = format!("{e:#}");
            if msg.contains("config rejected") || msg.contains("(usage)") {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
