//! 2-D point mass with a goal-reaching reward. Explicit Euler at dt = 0.05,
//! horizon-only termination.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DomainParams, EnvError, Environment, StepResult};
use crate::rng::stream;

pub const DT: f64 = 0.05;
pub const START: [f64; 2] = [1.0, 1.0];
pub const GOAL: [f64; 2] = [0.0, 0.0];
pub const MAX_ACTION: f64 = 1.0;
pub const BASE_MASS: f64 = 1.0;
const CONTROL_COST: f64 = 0.01;

pub struct PointMassEnv {
    params: DomainParams,
    horizon: usize,
    seed: u64,
    state: [f64; 4],
    t: usize,
    done: bool,
}

impl PointMassEnv {
    pub fn new(params: DomainParams, horizon: usize, seed: u64) -> Self {
        let mut env = Self {
            params,
            horizon,
            seed,
            state: [0.0; 4],
            t: 0,
            done: false,
        };
        env.reset();
        env
    }
}

impl Environment for PointMassEnv {
    fn reset(&mut self) -> Vec<f64> {
        let mut rng: ChaCha8Rng = stream(self.seed, "point_mass_reset", 0);
        let sigma = self.params.noise_scale;
        let mut state = [START[0], START[1], 0.0, 0.0];
        for s in state.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *s += sigma * z;
        }
        self.state = state;
        self.t = 0;
        self.done = false;
        self.state.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if action.len() != 2 {
            return Err(EnvError::ActionDimension {
                got: action.len(),
                expected: 2,
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        let fx = action[0].clamp(-MAX_ACTION, MAX_ACTION);
        let fy = action[1].clamp(-MAX_ACTION, MAX_ACTION);

        let mass = BASE_MASS * self.params.mass_mult;
        let damp = 1.0 - self.params.friction * DT;
        let [px, py, vx, vy] = self.state;
        let nvx = vx * damp + fx / mass * DT;
        let nvy = vy * damp + fy / mass * DT;
        let npx = px + nvx * DT;
        let npy = py + nvy * DT;
        self.state = [npx, npy, nvx, nvy];

        let dist = ((npx - GOAL[0]).powi(2) + (npy - GOAL[1]).powi(2)).sqrt();
        let reward = -dist - CONTROL_COST * (fx * fx + fy * fy);

        self.t += 1;
        self.done = self.t >= self.horizon;
        Ok(StepResult {
            next_state: self.state.to_vec(),
            reward,
            done: self.done,
        })
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn max_action(&self) -> f64 {
        MAX_ACTION
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_params(mass_mult: f64, friction: f64) -> DomainParams {
        DomainParams::new(0.0, friction, mass_mult)
    }

    #[test]
    fn reward_is_zero_at_goal_with_zero_action() {
        let mut env = PointMassEnv::new(quiet_params(1.0, 0.0), 10, 0);
        env.state = [GOAL[0], GOAL[1], 0.0, 0.0];
        let out = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn zero_friction_zero_action_conserves_velocity() {
        let mut env = PointMassEnv::new(quiet_params(1.0, 0.0), 50, 0);
        env.state = [0.0, 0.0, 0.3, -0.2];
        for _ in 0..20 {
            let out = env.step(&[0.0, 0.0]).unwrap();
            assert_eq!(&out.next_state[2..], &[0.3, -0.2]);
        }
    }

    #[test]
    fn step_after_done_errors() {
        let mut env = PointMassEnv::new(quiet_params(1.0, 0.0), 1, 0);
        env.step(&[0.0, 0.0]).unwrap();
        assert!(matches!(env.step(&[0.0, 0.0]), Err(EnvError::StepAfterDone)));
    }

    #[test]
    fn nan_action_errors() {
        let mut env = PointMassEnv::new(quiet_params(1.0, 0.0), 10, 0);
        assert!(matches!(
            env.step(&[f64::NAN, 0.0]),
            Err(EnvError::NonFiniteAction)
        ));
    }

    #[test]
    fn trajectories_depend_continuously_on_mass() {
        // Fixed action sequence; sup-distance between trajectories shrinks
        // with the parameter perturbation.
        let actions: Vec<[f64; 2]> = (0..50)
            .map(|i| {
                let a = (i as f64 * 0.37).sin();
                [a, -a * 0.5]
            })
            .collect();
        let rollout = |mass: f64| -> Vec<Vec<f64>> {
            let mut env = PointMassEnv::new(quiet_params(mass, 0.1), 60, 9);
            actions
                .iter()
                .map(|a| env.step(a).unwrap().next_state)
                .collect()
        };
        let base = rollout(1.0);
        let sup = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
            a.iter()
                .zip(b)
                .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
                .fold(0.0, f64::max)
        };
        let d_big = sup(&base, &rollout(1.1));
        let d_small = sup(&base, &rollout(1.001));
        let d_tiny = sup(&base, &rollout(1.000001));
        assert!(d_small < d_big);
        assert!(d_tiny < 1e-3);
    }
}
