//! Finite MDP with an explicit state-action ground metric; the substrate for
//! the exact verification oracle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::slip_grid::{apply_move, DIRS};
use super::EnvError;

pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("transition row (s={state}, a={action}) sums to {sum}, not 1")]
    RowNotStochastic { state: usize, action: usize, sum: f64 },
    #[error("reward at (s={state}, a={action}) exceeds bound {r_max}")]
    RewardOutOfBounds { state: usize, action: usize, r_max: f64 },
    #[error("metric violates {property} at entries ({i}, {j})")]
    InvalidMetric { property: &'static str, i: usize, j: usize },
    #[error("discount {0} outside [0, 1)")]
    InvalidGamma(f64),
}

/// Finite transition tensor, bounded reward matrix, discount, and a symmetric
/// ground metric over state-action pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// T[s][a][s'] flattened row-major.
    pub transition: Vec<f64>,
    /// R[s][a] flattened.
    pub reward: Vec<f64>,
    pub gamma: f64,
    /// Ground metric over (s,a) pairs, flattened (n_states * n_actions)^2.
    pub metric: Vec<f64>,
    pub r_max: f64,
}

impl TabularMdp {
    pub fn n_sa(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn sa_index(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    pub fn reward_at(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn metric_at(&self, s1: usize, a1: usize, s2: usize, a2: usize) -> f64 {
        let n = self.n_sa();
        self.metric[self.sa_index(s1, a1) * n + self.sa_index(s2, a2)]
    }

    /// State-to-state distance, read off the pair metric at a shared action.
    /// Valid for product-form metrics (cell distance plus action mismatch).
    pub fn state_distance(&self, s1: usize, s2: usize) -> f64 {
        self.metric_at(s1, 0, s2, 0)
    }

    pub fn validate(&self) -> Result<(), TabularError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(TabularError::InvalidGamma(self.gamma));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let sum: f64 = self.row(s, a).iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(TabularError::RowNotStochastic { state: s, action: a, sum });
                }
                if self.reward_at(s, a).abs() > self.r_max + 1e-12 {
                    return Err(TabularError::RewardOutOfBounds {
                        state: s,
                        action: a,
                        r_max: self.r_max,
                    });
                }
            }
        }
        let n = self.n_sa();
        for i in 0..n {
            for j in 0..n {
                let d = self.metric[i * n + j];
                if i == j && d != 0.0 {
                    return Err(TabularError::InvalidMetric {
                        property: "identity of indiscernibles",
                        i,
                        j,
                    });
                }
                if i != j && d <= 0.0 {
                    return Err(TabularError::InvalidMetric {
                        property: "positivity",
                        i,
                        j,
                    });
                }
                if (d - self.metric[j * n + i]).abs() > 1e-15 {
                    return Err(TabularError::InvalidMetric {
                        property: "symmetry",
                        i,
                        j,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Builds a width x height slippery gridworld.
///
/// The intended move succeeds with probability 1 - slip; the two lateral
/// directions each receive slip/2. Off-grid moves stay in place. Reward is the
/// negated Manhattan distance to the goal corner, and the ground metric is
/// Manhattan cell distance plus an action-mismatch indicator.
pub fn build_slipgrid(
    width: usize,
    height: usize,
    slip: f64,
    gamma: f64,
) -> Result<TabularMdp, EnvError> {
    if width == 0 || height == 0 {
        return Err(EnvError::InvalidGrid { width, height });
    }
    if !(0.0..=1.0).contains(&slip) {
        return Err(EnvError::InvalidSlip(slip));
    }
    let n_states = width * height;
    let n_actions = DIRS.len();
    let goal = (width - 1, height - 1);

    let mut transition = vec![0.0; n_states * n_actions * n_states];
    let mut reward = vec![0.0; n_states * n_actions];
    for y in 0..height {
        for x in 0..width {
            let s = y * width + x;
            let dist = (x as i64 - goal.0 as i64).unsigned_abs()
                + (y as i64 - goal.1 as i64).unsigned_abs();
            for a in 0..n_actions {
                reward[s * n_actions + a] = -(dist as f64);
                let base = (s * n_actions + a) * n_states;
                for (dir, prob) in [
                    (a, 1.0 - slip),
                    ((a + 1) % 4, slip / 2.0),
                    ((a + 3) % 4, slip / 2.0),
                ] {
                    let (nx, ny) = apply_move(x, y, dir, width, height);
                    transition[base + ny * width + nx] += prob;
                }
            }
        }
    }

    let n_sa = n_states * n_actions;
    let mut metric = vec![0.0; n_sa * n_sa];
    for s1 in 0..n_states {
        let (x1, y1) = (s1 % width, s1 / width);
        for a1 in 0..n_actions {
            for s2 in 0..n_states {
                let (x2, y2) = (s2 % width, s2 / width);
                let cell = (x1 as i64 - x2 as i64).unsigned_abs()
                    + (y1 as i64 - y2 as i64).unsigned_abs();
                for a2 in 0..n_actions {
                    let d = cell as f64 + if a1 == a2 { 0.0 } else { 1.0 };
                    metric[(s1 * n_actions + a1) * n_sa + (s2 * n_actions + a2)] = d;
                }
            }
        }
    }

    let r_max = ((width - 1) + (height - 1)) as f64;
    let mdp = TabularMdp {
        n_states,
        n_actions,
        transition,
        reward,
        gamma,
        metric,
        r_max: r_max.max(1.0),
    };
    debug_assert!(mdp.validate().is_ok());
    Ok(mdp)
}

/// Deterministic shortest-path policy toward the goal corner (prefers moving
/// right, then up). Shared by the oracle checks.
pub fn greedy_goal_policy(width: usize, height: usize) -> Vec<usize> {
    let mut policy = vec![0; width * height];
    for y in 0..height {
        for x in 0..width {
            let s = y * width + x;
            policy[s] = if x < width - 1 {
                0 // right
            } else if y < height - 1 {
                1 // up
            } else {
                0
            };
        }
    }
    policy
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_slip_rows_are_one_hot() {
        let mdp = build_slipgrid(3, 3, 0.0, 0.9).unwrap();
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let row = mdp.row(s, a);
                assert_eq!(row.iter().filter(|&&p| p > 0.0).count(), 1);
                assert_eq!(row.iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn rows_sum_to_one_with_slip() {
        let mdp = build_slipgrid(2, 2, 0.2, 0.9).unwrap();
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                assert!((mdp.row(s, a).iter().sum::<f64>() - 1.0).abs() <= ROW_SUM_TOL);
            }
        }
        mdp.validate().unwrap();
    }

    #[test]
    fn full_slip_splits_between_laterals() {
        // slip = 1 from the center of a 3x3 grid, action right: laterals are
        // up and down, each with probability 0.5
        let mdp = build_slipgrid(3, 3, 1.0, 0.9).unwrap();
        let center = 4; // (1,1)
        let row = mdp.row(center, 0);
        let up = 7; // (1,2)
        let down = 1; // (1,0)
        assert_eq!(row[up], 0.5);
        assert_eq!(row[down], 0.5);
        assert_eq!(row.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(build_slipgrid(0, 3, 0.1, 0.9).is_err());
    }

    #[test]
    fn metric_is_manhattan_plus_action_indicator() {
        let mdp = build_slipgrid(3, 2, 0.1, 0.9).unwrap();
        // (0,0) vs (2,1): manhattan 3; different action adds 1
        assert_eq!(mdp.metric_at(0, 0, 5, 0), 3.0);
        assert_eq!(mdp.metric_at(0, 0, 5, 2), 4.0);
        assert_eq!(mdp.metric_at(4, 1, 4, 1), 0.0);
        assert_eq!(mdp.state_distance(0, 5), 3.0);
    }
}
