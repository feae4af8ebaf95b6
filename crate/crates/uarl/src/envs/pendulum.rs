//! Underactuated pendulum swing-up. Angle is measured from upright; the
//! episode starts hanging near the bottom.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;

use super::{DomainParams, EnvError, Environment, StepResult};
use crate::rng::stream;

pub const DT: f64 = 0.05;
pub const GRAVITY: f64 = 9.81;
pub const LENGTH: f64 = 1.0;
pub const BASE_MASS: f64 = 1.0;
pub const MAX_TORQUE: f64 = 2.0;
const MAX_SPEED: f64 = 8.0;

fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI) % (2.0 * PI);
    if t < 0.0 {
        t += 2.0 * PI;
    }
    t - PI
}

pub struct PendulumEnv {
    params: DomainParams,
    horizon: usize,
    seed: u64,
    theta: f64,
    theta_dot: f64,
    t: usize,
    done: bool,
}

impl PendulumEnv {
    pub fn new(params: DomainParams, horizon: usize, seed: u64) -> Self {
        let mut env = Self {
            params,
            horizon,
            seed,
            theta: PI,
            theta_dot: 0.0,
            t: 0,
            done: false,
        };
        env.reset();
        env
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

impl Environment for PendulumEnv {
    fn reset(&mut self) -> Vec<f64> {
        let mut rng: ChaCha8Rng = stream(self.seed, "pendulum_reset", 0);
        let sigma = self.params.noise_scale;
        let z0: f64 = StandardNormal.sample(&mut rng);
        let z1: f64 = StandardNormal.sample(&mut rng);
        self.theta = wrap_angle(PI + sigma * z0);
        self.theta_dot = sigma * z1;
        self.t = 0;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if action.len() != 1 {
            return Err(EnvError::ActionDimension {
                got: action.len(),
                expected: 1,
            });
        }
        if !action[0].is_finite() {
            return Err(EnvError::NonFiniteAction);
        }
        let u = action[0].clamp(-MAX_TORQUE, MAX_TORQUE);
        let mass = BASE_MASS * self.params.mass_mult;

        let cost = wrap_angle(self.theta).powi(2) + 0.1 * self.theta_dot.powi(2) + 0.001 * u * u;

        let accel = 3.0 * GRAVITY / (2.0 * LENGTH) * self.theta.sin()
            + 3.0 / (mass * LENGTH * LENGTH) * u;
        let damp = 1.0 - self.params.friction * DT;
        self.theta_dot = ((self.theta_dot + accel * DT) * damp).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta = wrap_angle(self.theta + self.theta_dot * DT);

        self.t += 1;
        self.done = self.t >= self.horizon;
        Ok(StepResult {
            next_state: self.observation(),
            reward: -cost,
            done: self.done,
        })
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn max_action(&self) -> f64 {
        MAX_TORQUE
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}
