//! Uncertainty-aware offline RL at desk scale.
//!
//! A diversity-regularized critic ensemble quantifies epistemic uncertainty,
//! a progressive domain-randomization curriculum expands training variability
//! until a variance-based gate certifies deployment on a small target-proxy
//! dataset, and an exact tabular oracle certifies the theory the pipeline
//! rests on: fixed-point gap bounds, operator perturbation bounds,
//! bias reduction under uncertainty weighting, and weighted fitted-Q
//! convergence.

pub mod agent;
pub mod buffer;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod ensemble;
pub mod envs;
pub mod gate;
pub mod nn;
pub mod oracle;
pub mod report;
pub mod rng;
