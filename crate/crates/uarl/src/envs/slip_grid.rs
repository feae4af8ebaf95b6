//! Slippery gridworld as a rollout environment. The continuous 2-d action is
//! decoded into one of four moves; `noise_scale` doubles as the slip
//! probability. Mirrors the tabular MDP built by `build_slipgrid`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DomainParams, EnvError, Environment, StepResult};
use crate::rng::stream;

/// Action index order: right, up, left, down.
pub const DIRS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

pub struct SlipGridEnv {
    width: usize,
    height: usize,
    slip: f64,
    horizon: usize,
    seed: u64,
    pos: (usize, usize),
    t: usize,
    done: bool,
    rng: ChaCha8Rng,
}

pub(crate) fn decode_action(action: &[f64]) -> usize {
    if action[0].abs() >= action[1].abs() {
        if action[0] >= 0.0 {
            0
        } else {
            2
        }
    } else if action[1] >= 0.0 {
        1
    } else {
        3
    }
}

pub(crate) fn apply_move(x: usize, y: usize, dir: usize, w: usize, h: usize) -> (usize, usize) {
    let (dx, dy) = DIRS[dir];
    let nx = x as i64 + dx;
    let ny = y as i64 + dy;
    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
        (x, y)
    } else {
        (nx as usize, ny as usize)
    }
}

impl SlipGridEnv {
    pub fn new(
        width: usize,
        height: usize,
        params: DomainParams,
        horizon: usize,
        seed: u64,
    ) -> Result<Self, EnvError> {
        if width == 0 || height == 0 {
            return Err(EnvError::InvalidGrid { width, height });
        }
        let slip = params.noise_scale;
        if !(0.0..=1.0).contains(&slip) {
            return Err(EnvError::InvalidSlip(slip));
        }
        let mut env = Self {
            width,
            height,
            slip,
            horizon,
            seed,
            pos: (0, 0),
            t: 0,
            done: false,
            rng: stream(seed, "slip_grid", 0),
        };
        env.reset();
        Ok(env)
    }

    fn goal(&self) -> (usize, usize) {
        (self.width - 1, self.height - 1)
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.pos.0 as f64, self.pos.1 as f64]
    }
}

impl Environment for SlipGridEnv {
    fn reset(&mut self) -> Vec<f64> {
        self.rng = stream(self.seed, "slip_grid", 0);
        self.pos = (0, 0);
        self.t = 0;
        self.done = false;
        self.observation()
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
        let intended = decode_action(action);
        let u: f64 = self.rng.gen();
        let dir = if u < 1.0 - self.slip {
            intended
        } else if u < 1.0 - self.slip / 2.0 {
            (intended + 1) % 4
        } else {
            (intended + 3) % 4
        };

        let (gx, gy) = self.goal();
        let dist = (self.pos.0 as i64 - gx as i64).unsigned_abs()
            + (self.pos.1 as i64 - gy as i64).unsigned_abs();
        let reward = -(dist as f64);

        self.pos = apply_move(self.pos.0, self.pos.1, dir, self.width, self.height);
        self.t += 1;
        self.done = self.t >= self.horizon;
        Ok(StepResult {
            next_state: self.observation(),
            reward,
            done: self.done,
        })
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn max_action(&self) -> f64 {
        1.0
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}
