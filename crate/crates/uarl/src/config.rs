//! Experiment configuration: JSON schema, validation with field paths, and
//! the bundled demo setup.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::TrainConfig;
use crate::curriculum::DataConfig;
use crate::envs::{DomainParams, EnvFamily, EnvSpec, ParamKind};
use crate::gate::GateConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config at `{path}`: {msg}")]
    Field { path: String, msg: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvSection {
    pub spec: EnvSpec,
    pub active_param: ParamKind,
    /// Interval ladder for the active parameter; entry 0 is the nominal
    /// range, entry 1 the first repulsive range.
    pub schedule: Vec<[f64; 2]>,
}

fn default_full_schedule() -> bool {
    false
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub gate: GateConfig,
    pub output_dir: String,
    /// Withheld target-domain parameters: the proxy dataset is collected here
    /// and the reporting-only deployment return is evaluated here.
    pub target_phi: Option<DomainParams>,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default = "default_full_schedule")]
    pub full_schedule: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |path: &str, msg: String| ConfigError::Field {
            path: path.to_string(),
            msg,
        };
        self.env
            .spec
            .validate()
            .map_err(|e| field("env.spec", e.to_string()))?;
        if self.env.schedule.len() < 2 {
            return Err(field(
                "env.schedule",
                format!("need at least 2 entries, got {}", self.env.schedule.len()),
            ));
        }
        for (i, [lo, hi]) in self.env.schedule.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(field(
                    &format!("env.schedule[{i}]"),
                    format!("invalid interval [{lo}, {hi}]"),
                ));
            }
            if i > 0 {
                let [plo, phi] = self.env.schedule[i - 1];
                if *lo > plo || *hi < phi {
                    return Err(field(
                        &format!("env.schedule[{i}]"),
                        "schedule entries must expand monotonically".to_string(),
                    ));
                }
            }
        }
        self.train
            .validate()
            .map_err(|e| field("train", e.to_string()))?;
        self.gate
            .validate()
            .map_err(|e| field("gate", e.to_string()))?;
        if self.data.nominal_episodes == 0
            || self.data.repulsive_episodes == 0
            || self.data.target_episodes == 0
        {
            return Err(field("data", "episode counts must be >= 1".to_string()));
        }
        if let Some(phi) = &self.target_phi {
            phi.validate()
                .map_err(|e| field("target_phi", e.to_string()))?;
        }
        if self.output_dir.is_empty() {
            return Err(field("output_dir", "must be non-empty".to_string()));
        }
        Ok(())
    }

    /// Output root, honoring the UARL_RUNS_DIR override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os("UARL_RUNS_DIR") {
            Some(root) => {
                let name = Path::new(&self.output_dir)
                    .file_name()
                    .map(|s| s.to_os_string())
                    .unwrap_or_else(|| "run".into());
                PathBuf::from(root).join(name)
            }
            None => PathBuf::from(&self.output_dir),
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let config: ExperimentConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

/// The bundled point-mass mass-randomization demo: ladder 1x -> 5x -> 10x ->
/// 15x with the withheld target at 12x, inside the final range.
pub fn demo_config() -> ExperimentConfig {
    let nominal = DomainParams::new(0.05, 0.0, 1.0);
    ExperimentConfig {
        env: EnvSection {
            spec: EnvSpec {
                family: EnvFamily::PointMass,
                horizon: 200,
                nominal_params: nominal,
                grid_width: 5,
                grid_height: 5,
            },
            active_param: ParamKind::MassMult,
            schedule: vec![[1.0, 1.0], [1.0, 5.0], [1.0, 10.0], [1.0, 15.0]],
        },
        data: DataConfig::default(),
        train: TrainConfig {
            steps: 3000,
            ..Default::default()
        },
        gate: GateConfig::default(),
        output_dir: "runs/demo".to_string(),
        target_phi: Some(DomainParams::new(0.05, 0.0, 12.0)),
        max_iters: None,
        full_schedule: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_config_is_valid_and_round_trips() {
        let cfg = demo_config();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.env.schedule, cfg.env.schedule);
    }

    #[test]
    fn validation_reports_field_paths() {
        let mut cfg = demo_config();
        cfg.env.schedule = vec![[1.0, 1.0]];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("env.schedule"));

        let mut cfg = demo_config();
        cfg.env.schedule = vec![[1.0, 5.0], [1.0, 3.0]];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("monotonically"));

        let mut cfg = demo_config();
        cfg.train.gamma = 1.5;
        assert!(cfg.validate().unwrap_err().to_string().contains("train"));
    }

    #[test]
    fn runs_dir_override() {
        let cfg = demo_config();
        std::env::remove_var("UARL_RUNS_DIR");
        assert_eq!(cfg.resolved_output_dir(), PathBuf::from("runs/demo"));
        std::env::set_var("UARL_RUNS_DIR", "/tmp/uarl-test-runs");
        assert_eq!(
            cfg.resolved_output_dir(),
            PathBuf::from("/tmp/uarl-test-runs/demo")
        );
        std::env::remove_var("UARL_RUNS_DIR");
    }
}
