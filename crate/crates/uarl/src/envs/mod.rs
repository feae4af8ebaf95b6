//! Parametric simulation environments with domain randomization, plus a
//! finite slip-gridworld family used by the exact verification oracle.

mod pendulum;
mod point_mass;
mod slip_grid;
mod tabular;

pub use pendulum::PendulumEnv;
pub use point_mass::PointMassEnv;
pub use slip_grid::SlipGridEnv;
pub use tabular::{build_slipgrid, greedy_goal_policy, TabularError, TabularMdp};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid domain parameter `{field}`: {value} ({reason})")]
    InvalidParam {
        field: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("invalid range for `{field}`: lo {lo} > hi {hi}")]
    InvalidRange { field: &'static str, lo: f64, hi: f64 },
    #[error("randomization budget exhausted: iteration {iteration} beyond schedule of length {schedule_len}")]
    RandomizationBudgetExhausted { iteration: usize, schedule_len: usize },
    #[error("schedule entry {iteration} [{lo}, {hi}] does not contain the current range [{cur_lo}, {cur_hi}]")]
    ScheduleNotMonotone {
        iteration: usize,
        lo: f64,
        hi: f64,
        cur_lo: f64,
        cur_hi: f64,
    },
    #[error("step called after episode end")]
    StepAfterDone,
    #[error("non-finite action component")]
    NonFiniteAction,
    #[error("action has dimension {got}, expected {expected}")]
    ActionDimension { got: usize, expected: usize },
    #[error("invalid grid dimensions {width}x{height}")]
    InvalidGrid { width: usize, height: usize },
    #[error("invalid horizon {0}, must be >= 1")]
    InvalidHorizon(usize),
    #[error("slip probability {0} outside [0, 1]")]
    InvalidSlip(f64),
}

/// Physics parameters indexing the transition dynamics of an environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    /// Initial-state perturbation magnitude (doubles as the slip probability
    /// for the grid family).
    pub noise_scale: f64,
    /// Velocity damping coefficient.
    pub friction: f64,
    /// Multiplier on the nominal mass.
    pub mass_mult: f64,
}

impl DomainParams {
    pub fn new(noise_scale: f64, friction: f64, mass_mult: f64) -> Self {
        Self {
            noise_scale,
            friction,
            mass_mult,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let check = |field: &'static str, value: f64| -> Result<(), EnvError> {
            if !value.is_finite() {
                return Err(EnvError::InvalidParam {
                    field,
                    value,
                    reason: "must be finite",
                });
            }
            Ok(())
        };
        check("noise_scale", self.noise_scale)?;
        check("friction", self.friction)?;
        check("mass_mult", self.mass_mult)?;
        if self.noise_scale < 0.0 {
            return Err(EnvError::InvalidParam {
                field: "noise_scale",
                value: self.noise_scale,
                reason: "must be >= 0",
            });
        }
        if self.friction < 0.0 {
            return Err(EnvError::InvalidParam {
                field: "friction",
                value: self.friction,
                reason: "must be >= 0",
            });
        }
        if self.mass_mult <= 0.0 {
            return Err(EnvError::InvalidParam {
                field: "mass_mult",
                value: self.mass_mult,
                reason: "must be > 0",
            });
        }
        Ok(())
    }

    /// Value of the named parameter.
    pub fn get(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::NoiseScale => self.noise_scale,
            ParamKind::Friction => self.friction,
            ParamKind::MassMult => self.mass_mult,
        }
    }

    pub fn set(&mut self, kind: ParamKind, value: f64) {
        match kind {
            ParamKind::NoiseScale => self.noise_scale = value,
            ParamKind::Friction => self.friction = value,
            ParamKind::MassMult => self.mass_mult = value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    NoiseScale,
    Friction,
    MassMult,
}

impl ParamKind {
    pub fn name(&self) -> &'static str {
        match self {
            ParamKind::NoiseScale => "noise_scale",
            ParamKind::Friction => "friction",
            ParamKind::MassMult => "mass_mult",
        }
    }
}

/// Closed intervals for every domain parameter with exactly one parameter
/// marked active for randomization; inactive intervals are degenerate at the
/// nominal values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub noise_scale: [f64; 2],
    pub friction: [f64; 2],
    pub mass_mult: [f64; 2],
    pub active_param: ParamKind,
}

impl ParamRange {
    /// Range that randomizes `active` over `interval` and pins the other
    /// parameters at their nominal values.
    pub fn around(nominal: &DomainParams, active: ParamKind, interval: [f64; 2]) -> Result<Self, EnvError> {
        nominal.validate()?;
        if interval[0] > interval[1] {
            return Err(EnvError::InvalidRange {
                field: active.name(),
                lo: interval[0],
                hi: interval[1],
            });
        }
        let mut r = Self {
            noise_scale: [nominal.noise_scale; 2],
            friction: [nominal.friction; 2],
            mass_mult: [nominal.mass_mult; 2],
            active_param: active,
        };
        *r.interval_mut(active) = interval;
        Ok(r)
    }

    pub fn interval(&self, kind: ParamKind) -> [f64; 2] {
        match kind {
            ParamKind::NoiseScale => self.noise_scale,
            ParamKind::Friction => self.friction,
            ParamKind::MassMult => self.mass_mult,
        }
    }

    fn interval_mut(&mut self, kind: ParamKind) -> &mut [f64; 2] {
        match kind {
            ParamKind::NoiseScale => &mut self.noise_scale,
            ParamKind::Friction => &mut self.friction,
            ParamKind::MassMult => &mut self.mass_mult,
        }
    }

    pub fn active_interval(&self) -> [f64; 2] {
        self.interval(self.active_param)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        for (field, [lo, hi]) in [
            ("noise_scale", self.noise_scale),
            ("friction", self.friction),
            ("mass_mult", self.mass_mult),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(EnvError::InvalidRange { field, lo, hi });
            }
        }
        Ok(())
    }

    /// True when `other`'s intervals all contain this range's intervals.
    pub fn is_subset_of(&self, other: &ParamRange) -> bool {
        for kind in [ParamKind::NoiseScale, ParamKind::Friction, ParamKind::MassMult] {
            let a = self.interval(kind);
            let b = other.interval(kind);
            if a[0] < b[0] || a[1] > b[1] {
                return false;
            }
        }
        true
    }

    /// Midpoint of the active interval; used for domain params that should be
    /// representative of the range.
    pub fn midpoint_params(&self) -> DomainParams {
        let mut p = DomainParams::new(self.noise_scale[0], self.friction[0], self.mass_mult[0]);
        let [lo, hi] = self.active_interval();
        p.set(self.active_param, 0.5 * (lo + hi));
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvFamily {
    PointMass,
    Pendulum,
    SlipGrid,
}

fn default_grid_dim() -> usize {
    5
}

/// Static description of an environment family instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub family: EnvFamily,
    pub horizon: usize,
    pub nominal_params: DomainParams,
    #[serde(default = "default_grid_dim")]
    pub grid_width: usize,
    #[serde(default = "default_grid_dim")]
    pub grid_height: usize,
}

impl EnvSpec {
    pub fn point_mass(horizon: usize, nominal: DomainParams) -> Self {
        Self {
            family: EnvFamily::PointMass,
            horizon,
            nominal_params: nominal,
            grid_width: default_grid_dim(),
            grid_height: default_grid_dim(),
        }
    }

    pub fn pendulum(horizon: usize, nominal: DomainParams) -> Self {
        Self {
            family: EnvFamily::Pendulum,
            horizon,
            nominal_params: nominal,
            grid_width: default_grid_dim(),
            grid_height: default_grid_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.horizon < 1 {
            return Err(EnvError::InvalidHorizon(self.horizon));
        }
        self.nominal_params.validate()?;
        if self.family == EnvFamily::SlipGrid && (self.grid_width == 0 || self.grid_height == 0) {
            return Err(EnvError::InvalidGrid {
                width: self.grid_width,
                height: self.grid_height,
            });
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        match self.family {
            EnvFamily::PointMass => 4,
            EnvFamily::Pendulum => 3,
            EnvFamily::SlipGrid => 2,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.family {
            EnvFamily::PointMass => 2,
            EnvFamily::Pendulum => 1,
            EnvFamily::SlipGrid => 2,
        }
    }

    pub fn max_action(&self) -> f64 {
        match self.family {
            EnvFamily::PointMass => 1.0,
            EnvFamily::Pendulum => 2.0,
            EnvFamily::SlipGrid => 1.0,
        }
    }
}

pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Single-threaded environment state machine. Deterministic given the
/// construction seed and the action sequence.
pub trait Environment {
    /// Resets to the (seed-determined) initial state. Calling reset twice on
    /// envs built with the same seed yields identical states.
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError>;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn max_action(&self) -> f64;
    fn horizon(&self) -> usize;
}

/// Instantiates an environment with the given domain parameters.
pub fn make_env(
    spec: &EnvSpec,
    params: &DomainParams,
    seed: u64,
) -> Result<Box<dyn Environment>, EnvError> {
    spec.validate()?;
    params.validate()?;
    Ok(match spec.family {
        EnvFamily::PointMass => Box::new(PointMassEnv::new(*params, spec.horizon, seed)),
        EnvFamily::Pendulum => Box::new(PendulumEnv::new(*params, spec.horizon, seed)),
        EnvFamily::SlipGrid => Box::new(SlipGridEnv::new(
            spec.grid_width,
            spec.grid_height,
            *params,
            spec.horizon,
            seed,
        )?),
    })
}

/// Draws domain parameters: the active parameter uniformly over its interval,
/// inactive parameters at their pinned values.
pub fn sample_params(range: &ParamRange, rng: &mut rand_chacha::ChaCha8Rng) -> DomainParams {
    use rand::Rng;
    let mut params = DomainParams::new(
        range.noise_scale[0],
        range.friction[0],
        range.mass_mult[0],
    );
    let [lo, hi] = range.active_interval();
    let u: f64 = rng.gen();
    params.set(range.active_param, lo + u * (hi - lo));
    params
}

/// Moves the active interval of `range` to the schedule entry for `iteration`.
///
/// Entries must grow monotonically; stepping past the end of the schedule is
/// a randomization-budget-exhausted error.
pub fn expand_range(
    range: &ParamRange,
    schedule: &[[f64; 2]],
    iteration: usize,
) -> Result<ParamRange, EnvError> {
    if iteration >= schedule.len() {
        return Err(EnvError::RandomizationBudgetExhausted {
            iteration,
            schedule_len: schedule.len(),
        });
    }
    let [lo, hi] = schedule[iteration];
    let [cur_lo, cur_hi] = range.active_interval();
    if lo > cur_lo || hi < cur_hi {
        return Err(EnvError::ScheduleNotMonotone {
            iteration,
            lo,
            hi,
            cur_lo,
            cur_hi,
        });
    }
    let mut out = *range;
    *out.interval_mut(range.active_param) = [lo, hi];
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn nominal() -> DomainParams {
        DomainParams::new(0.1, 0.0, 1.0)
    }

    #[test]
    fn params_validation_names_offending_field() {
        let bad = DomainParams::new(0.1, 0.0, 0.0);
        let err = bad.validate().unwrap_err();
        assert!(err.to_string().contains("mass_mult"));

        let bad = DomainParams::new(-1.0, 0.0, 1.0);
        assert!(bad.validate().unwrap_err().to_string().contains("noise_scale"));
    }

    #[test]
    fn make_env_rejects_invalid_params() {
        let spec = EnvSpec::point_mass(200, nominal());
        let bad = DomainParams::new(0.1, f64::NAN, 1.0);
        assert!(make_env(&spec, &bad, 0).is_err());
    }

    #[test]
    fn same_seed_resets_identically() {
        let spec = EnvSpec::point_mass(200, nominal());
        let params = DomainParams::new(0.1, 0.0, 1.0);
        let mut a = make_env(&spec, &params, 7).unwrap();
        let mut b = make_env(&spec, &params, 7).unwrap();
        assert_eq!(a.reset(), b.reset());
        // reset is a pure function of the seed
        let s1 = a.reset();
        let s2 = a.reset();
        assert_eq!(s1, s2);
    }

    #[test]
    fn zero_noise_reset_equals_nominal_start() {
        let spec = EnvSpec::point_mass(200, DomainParams::new(0.0, 0.0, 1.0));
        let params = DomainParams::new(0.0, 0.0, 1.0);
        let mut env = make_env(&spec, &params, 3).unwrap();
        assert_eq!(env.reset(), vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mass_schedule_progression_is_accepted() {
        // 1x -> 5x -> 10x -> 15x expansion ladder
        let schedule = [[1.0, 1.0], [1.0, 5.0], [1.0, 10.0], [1.0, 15.0]];
        let mut range = ParamRange::around(&nominal(), ParamKind::MassMult, [1.0, 1.0]).unwrap();
        for i in 1..schedule.len() {
            let next = expand_range(&range, &schedule, i).unwrap();
            assert!(range.is_subset_of(&next), "expansion must be monotone");
            range = next;
        }
        assert_eq!(range.mass_mult, [1.0, 15.0]);
    }

    #[test]
    fn expand_range_first_step_matches_ladder() {
        let schedule = [[1.0, 1.0], [1.0, 5.0]];
        let range = ParamRange::around(&nominal(), ParamKind::MassMult, [1.0, 1.0]).unwrap();
        let next = expand_range(&range, &schedule, 1).unwrap();
        assert_eq!(next.mass_mult, [1.0, 5.0]);
    }

    #[test]
    fn expand_past_schedule_is_budget_exhausted() {
        let schedule = [[1.0, 1.0], [1.0, 5.0]];
        let range = ParamRange::around(&nominal(), ParamKind::MassMult, [1.0, 5.0]).unwrap();
        let err = expand_range(&range, &schedule, 2).unwrap_err();
        assert!(matches!(err, EnvError::RandomizationBudgetExhausted { .. }));
        assert!(err.to_string().contains("budget exhausted"));
    }

    #[test]
    fn sample_params_degenerate_interval() {
        let range = ParamRange::around(&nominal(), ParamKind::MassMult, [2.0, 2.0]).unwrap();
        let mut rng = stream(0, "sample", 0);
        for _ in 0..32 {
            assert_eq!(sample_params(&range, &mut rng).mass_mult, 2.0);
        }
    }

    #[test]
    fn sample_params_inactive_fixed_at_nominal() {
        let nom = nominal();
        let range = ParamRange::around(&nom, ParamKind::MassMult, [1.0, 5.0]).unwrap();
        let mut rng = stream(1, "sample", 0);
        for _ in 0..32 {
            let p = sample_params(&range, &mut rng);
            assert_eq!(p.noise_scale, nom.noise_scale);
            assert_eq!(p.friction, nom.friction);
            assert!((1.0..=5.0).contains(&p.mass_mult));
        }
    }

    #[test]
    fn sample_params_uniform_mean() {
        let range = ParamRange::around(&nominal(), ParamKind::MassMult, [1.0, 5.0]).unwrap();
        let mut rng = stream(2, "sample", 0);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| sample_params(&range, &mut rng).mass_mult)
            .sum::<f64>()
            / n as f64;
        // U[1,5] has mean 3; tolerance well beyond 3 sigma of the MC estimate.
        assert!((mean - 3.0).abs() < 0.12, "mean {mean}");
    }
}
