//! Rollout collection, dataset tagging (nominal / repulsive / target-proxy),
//! and JSONL persistence.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{
    make_env, sample_params, DomainParams, EnvError, EnvFamily, EnvSpec, ParamRange,
};
use crate::rng::{child_seed, stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset role mismatch: expected {expected:?}, got {got:?}")]
    RoleMismatch { expected: Role, got: Role },
    #[error("dataset has an empty episode at index {0}")]
    EmptyEpisode(usize),
    #[error("dataset contains no episodes")]
    Empty,
    #[error("need at least one episode to collect")]
    NoEpisodesRequested,
    #[error("no scripted behavior policy for family {0:?}")]
    UnsupportedFamily(EnvFamily),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Nominal,
    Repulsive,
    TargetProxy,
}

/// One environment transition, tagged with the domain parameter that
/// generated its episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub phi: DomainParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub policy_id: String,
    pub env_spec: EnvSpec,
    pub range: ParamRange,
    pub seed: u64,
}

/// Episodes of transitions with a single role tag and complete provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub episodes: Vec<Vec<Transition>>,
    pub role: Role,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn n_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flatten()
    }

    pub fn flatten(&self) -> Vec<Transition> {
        self.transitions().cloned().collect()
    }

    /// Copy of the dataset under a new role; used when a repulsive set is
    /// absorbed into the nominal pool between curriculum iterations.
    pub fn with_role(&self, role: Role) -> Dataset {
        Dataset {
            episodes: self.episodes.clone(),
            role,
            provenance: self.provenance.clone(),
        }
    }

    pub fn expect_role(&self, expected: Role) -> Result<(), DataError> {
        if self.role != expected {
            return Err(DataError::RoleMismatch {
                expected,
                got: self.role,
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.episodes.is_empty() {
            return Err(DataError::Empty);
        }
        for (i, ep) in self.episodes.iter().enumerate() {
            if ep.is_empty() {
                return Err(DataError::EmptyEpisode(i));
            }
        }
        Ok(())
    }

    pub fn episode_returns(&self) -> Vec<f64> {
        self.episodes
            .iter()
            .map(|ep| ep.iter().map(|t| t.reward).sum())
            .collect()
    }
}

/// Anything that can drive rollouts. Implementations must be deterministic
/// given the state and the rng stream.
pub trait RolloutPolicy {
    fn act(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn id(&self) -> String;
}

/// PD controller toward the origin goal with optional Gaussian exploration.
pub struct PdPointMassPolicy {
    pub kp: f64,
    pub kd: f64,
    pub noise_sigma: f64,
}

impl Default for PdPointMassPolicy {
    fn default() -> Self {
        Self {
            kp: 4.0,
            kd: 3.0,
            noise_sigma: 0.1,
        }
    }
}

impl RolloutPolicy for PdPointMassPolicy {
    fn act(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut a = vec![
            -self.kp * state[0] - self.kd * state[2],
            -self.kp * state[1] - self.kd * state[3],
        ];
        if self.noise_sigma > 0.0 {
            for ai in a.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *ai += self.noise_sigma * z;
            }
        }
        a
    }

    fn id(&self) -> String {
        format!("pd_point_mass(kp={},kd={},sigma={})", self.kp, self.kd, self.noise_sigma)
    }
}

/// Energy-shaping swing-up with a PD catch near the top. Internally assumes
/// nominal mass; degradation under shifted dynamics is intended.
pub struct PendulumSwingUpPolicy {
    pub gain_energy: f64,
    pub kp: f64,
    pub kd: f64,
    pub noise_sigma: f64,
}

impl Default for PendulumSwingUpPolicy {
    fn default() -> Self {
        Self {
            gain_energy: 1.0,
            kp: 8.0,
            kd: 2.0,
            noise_sigma: 0.1,
        }
    }
}

impl RolloutPolicy for PendulumSwingUpPolicy {
    fn act(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        use crate::envs::PendulumEnv;
        let _ = PendulumEnv::new; // constants below mirror the env
        let (cos_t, sin_t, theta_dot) = (state[0], state[1], state[2]);
        let theta = sin_t.atan2(cos_t);
        let (g, l, m) = (9.81, 1.0, 1.0);
        let u = if cos_t > 0.9 {
            -self.kp * theta - self.kd * theta_dot
        } else {
            let energy = 0.5 * m * l * l * theta_dot * theta_dot + m * g * l * cos_t;
            let desired = m * g * l;
            self.gain_energy * theta_dot * (desired - energy)
        };
        let mut u = u.clamp(-2.0, 2.0);
        if self.noise_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            u += self.noise_sigma * z;
        }
        vec![u]
    }

    fn id(&self) -> String {
        format!(
            "pendulum_swing_up(ke={},kp={},kd={},sigma={})",
            self.gain_energy, self.kp, self.kd, self.noise_sigma
        )
    }
}

/// Scripted controller for the given family, with the default exploration
/// noise of sigma = 0.1.
pub fn scripted_behavior_policy(spec: &EnvSpec) -> Result<Box<dyn RolloutPolicy>, DataError> {
    match spec.family {
        EnvFamily::PointMass => Ok(Box::new(PdPointMassPolicy::default())),
        EnvFamily::Pendulum => Ok(Box::new(PendulumSwingUpPolicy::default())),
        EnvFamily::SlipGrid => Err(DataError::UnsupportedFamily(spec.family)),
    }
}

/// Runs `n_episodes` rollouts, sampling one domain parameter per episode and
/// tagging every transition with it. Episode seeds derive from the master
/// seed by index, so collections parallelize and reproduce exactly.
pub fn collect_rollouts(
    spec: &EnvSpec,
    range: &ParamRange,
    policy: &dyn RolloutPolicy,
    n_episodes: usize,
    seed: u64,
    role: Role,
) -> Result<Dataset, DataError> {
    if n_episodes == 0 {
        return Err(DataError::NoEpisodesRequested);
    }
    range.validate()?;
    let max_action = spec.max_action();
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut clipped = 0usize;
    for ep in 0..n_episodes {
        let mut ep_rng = stream(seed, "episode", ep as u64);
        let phi = sample_params(range, &mut ep_rng);
        let env_seed = child_seed(seed, "episode-env", ep as u64);
        let mut env = make_env(spec, &phi, env_seed)?;
        let mut state = env.reset();
        let mut transitions = Vec::with_capacity(spec.horizon);
        loop {
            let raw = policy.act(&state, &mut ep_rng);
            let action: Vec<f64> = raw
                .iter()
                .map(|&a| {
                    if a.abs() > max_action {
                        clipped += 1;
                    }
                    a.clamp(-max_action, max_action)
                })
                .collect();
            let out = env.step(&action)?;
            transitions.push(Transition {
                state: state.clone(),
                action,
                reward: out.reward,
                next_state: out.next_state.clone(),
                done: out.done,
                phi,
            });
            state = out.next_state;
            if out.done {
                break;
            }
        }
        episodes.push(transitions);
    }
    if clipped > 0 {
        eprintln!(
            "collect_rollouts: clipped {clipped} action components to the [{:.2}, {:.2}] box",
            -max_action, max_action
        );
    }
    Ok(Dataset {
        episodes,
        role,
        provenance: Provenance {
            policy_id: policy.id(),
            env_spec: spec.clone(),
            range: *range,
            seed,
        },
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    role: Role,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Line {
    ep: usize,
    t: usize,
    s: Vec<f64>,
    a: Vec<f64>,
    r: f64,
    s2: Vec<f64>,
    done: bool,
    phi: DomainParams,
}

/// Writes a dataset as JSONL: a header object, then one transition per line.
/// Floats round-trip bit-exactly through serde_json's shortest-representation
/// encoding.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header = Header {
        role: dataset.role,
        provenance: dataset.provenance.clone(),
    };
    serde_json::to_writer(&mut w, &header).map_err(io_err)?;
    w.write_all(b"\n")?;
    for (ep, transitions) in dataset.episodes.iter().enumerate() {
        for (t, tr) in transitions.iter().enumerate() {
            let line = Line {
                ep,
                t,
                s: tr.state.clone(),
                a: tr.action.clone(),
                r: tr.reward,
                s2: tr.next_state.clone(),
                done: tr.done,
                phi: tr.phi,
            };
            serde_json::to_writer(&mut w, &line).map_err(io_err)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

fn io_err(e: serde_json::Error) -> DataError {
    DataError::Io(std::io::Error::new(std::io::ErrorKind::Other, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or(DataError::Parse {
        line: 1,
        msg: "missing header".into(),
    })??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| DataError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;

    let mut episodes: Vec<Vec<Transition>> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&text).map_err(|e| DataError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if parsed.ep >= episodes.len() {
            if parsed.ep != episodes.len() || parsed.t != 0 {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: format!("out-of-order episode index {}", parsed.ep),
                });
            }
            episodes.push(Vec::new());
        } else if parsed.ep != episodes.len() - 1 || parsed.t != episodes[parsed.ep].len() {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("out-of-order transition ({}, {})", parsed.ep, parsed.t),
            });
        }
        episodes[parsed.ep].push(Transition {
            state: parsed.s,
            action: parsed.a,
            reward: parsed.r,
            next_state: parsed.s2,
            done: parsed.done,
            phi: parsed.phi,
        });
    }
    let dataset = Dataset {
        episodes,
        role: header.role,
        provenance: header.provenance,
    };
    dataset.validate().map_err(|_| DataError::Parse {
        line: 1,
        msg: "dataset has no complete episodes".into(),
    })?;
    Ok(dataset)
}

/// CSV of per-episode returns with the generating parameters.
pub fn export_returns_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "episode,steps,ret,noise_scale,friction,mass_mult")?;
    for (i, ep) in dataset.episodes.iter().enumerate() {
        let ret: f64 = ep.iter().map(|t| t.reward).sum();
        let phi = ep[0].phi;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            i,
            ep.len(),
            ret,
            phi.noise_scale,
            phi.friction,
            phi.mass_mult
        )?;
    }
    w.flush()?;
    Ok(())
}
