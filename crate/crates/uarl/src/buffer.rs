//! Uncertainty-weighted balanced replay buffer for fine-tuning.
//!
//! Sample weights follow the two-branch rule: nominal-pool samples are
//! weighted by the critic variance sigma^2, repulsive samples by its inverse.
//! Sampling is i.i.d. from the normalized weight distribution, with
//! replacement.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Dataset, Role, Transition};
use crate::ensemble::{mean_var, predict, CriticEnsemble, EnsembleError, Minibatch};

/// Variance floor applied before inversion, so zero-variance samples get a
/// large finite weight instead of dividing by zero.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("no datasets to merge")]
    NoDatasets,
    #[error("buffer is empty")]
    Empty,
    #[error("weights must be positive and finite (index {0})")]
    BadWeight(usize),
    #[error("role {0:?} has no uncertainty weight; expected nominal or repulsive")]
    UnknownRole(Role),
    #[error("dataset {index} has role {got:?}, expected nominal for merging")]
    NotNominal { index: usize, got: Role },
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

/// Eq-style two-branch weight: sigma^2 on nominal samples, 1/sigma^2 on
/// repulsive samples, with the variance floored before inversion.
pub fn uncertainty_weight(sigma2: f64, role: Role) -> Result<f64, BufferError> {
    let floored = sigma2.max(VARIANCE_FLOOR);
    match role {
        Role::Nominal => Ok(floored),
        Role::Repulsive => Ok(1.0 / floored),
        Role::TargetProxy => Err(BufferError::UnknownRole(role)),
    }
}

/// Per-transition weights from the ensemble's variance at each (s, a).
pub fn compute_weights(
    ensemble: &CriticEnsemble,
    transitions: &[Transition],
    roles: &[Role],
) -> Result<Vec<f64>, BufferError> {
    assert_eq!(transitions.len(), roles.len());
    let mut weights = Vec::with_capacity(transitions.len());
    for (t, role) in transitions.iter().zip(roles) {
        let preds = predict(ensemble, &t.state, &t.action)?;
        let sigma2 = mean_var(&preds).sigma2;
        weights.push(uncertainty_weight(sigma2, *role)?);
    }
    Ok(weights)
}

/// Transitions with a cached normalized sampling distribution.
#[derive(Debug, Clone)]
pub struct BalancedBuffer {
    transitions: Vec<Transition>,
    weights: Vec<f64>,
    cdf: Vec<f64>,
    role: Role,
}

impl BalancedBuffer {
    /// Buffer with explicit positive weights.
    pub fn with_weights(
        transitions: Vec<Transition>,
        weights: Vec<f64>,
        role: Role,
    ) -> Result<Self, BufferError> {
        if transitions.is_empty() {
            return Err(BufferError::Empty);
        }
        assert_eq!(transitions.len(), weights.len());
        for (i, w) in weights.iter().enumerate() {
            if !w.is_finite() || *w <= 0.0 {
                return Err(BufferError::BadWeight(i));
            }
        }
        let total: f64 = weights.iter().sum();
        let mut cdf = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w / total;
            cdf.push(acc);
        }
        debug_assert!((cdf.last().unwrap() - 1.0).abs() <= 1e-12);
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Self {
            transitions,
            weights,
            cdf,
            role,
        })
    }

    /// Uniform buffer over the given transitions; train-time nominal batch
    /// sampling goes through this so that uniform and weighted paths share one
    /// code path.
    pub fn uniform(transitions: Vec<Transition>, role: Role) -> Result<Self, BufferError> {
        let n = transitions.len();
        Self::with_weights(transitions, vec![1.0; n], role)
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// Normalized sampling probabilities.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    /// One index drawn proportionally to the weights.
    pub fn sample_index(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        self.cdf.partition_point(|&c| c <= u).min(self.len() - 1)
    }

    pub fn sample_indices(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..batch_size).map(|_| self.sample_index(rng)).collect()
    }

    /// I.i.d. weight-proportional batch. `batch_size = 0` yields an empty
    /// batch shell.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Minibatch {
        let idx = self.sample_indices(batch_size, rng);
        let refs: Vec<&Transition> = idx.iter().map(|&i| &self.transitions[i]).collect();
        if refs.is_empty() {
            let probe = &self.transitions[0];
            return Minibatch {
                states: vec![],
                actions: vec![],
                rewards: vec![],
                next_states: vec![],
                dones: vec![],
                n: 0,
                state_dim: probe.state.len(),
                action_dim: probe.action.len(),
                role: self.role,
            };
        }
        Minibatch::from_transitions(&refs, self.role).expect("non-empty batch")
    }
}

/// Pools nominal-role datasets into a buffer weighted by the ensemble's
/// per-sample variance (the nominal branch of the weight rule). Repulsive
/// sets must be re-tagged nominal before being absorbed.
pub fn merge_balanced(
    datasets: &[&Dataset],
    ensemble: &CriticEnsemble,
) -> Result<BalancedBuffer, BufferError> {
    if datasets.is_empty() {
        return Err(BufferError::NoDatasets);
    }
    for (index, d) in datasets.iter().enumerate() {
        if d.role != Role::Nominal {
            return Err(BufferError::NotNominal {
                index,
                got: d.role,
            });
        }
    }
    let transitions: Vec<Transition> = datasets.iter().flat_map(|d| d.flatten()).collect();
    let roles = vec![Role::Nominal; transitions.len()];
    let weights = compute_weights(ensemble, &transitions, &roles)?;
    BalancedBuffer::with_weights(transitions, weights, Role::Nominal)
}
