//! Finite-horizon stochastic control with stacked feedforward subnetworks.

pub mod diffgraph;
pub mod nets;
pub mod control;
pub mod envs;
pub mod baselines;
