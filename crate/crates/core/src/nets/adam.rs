use serde::{Deserialize, Serialize};

use super::NetError;
use crate::diffgraph::Tensor;

/// Piecewise-constant learning rate: `(start_iteration, rate)` pairs sorted by
/// start, the first starting at 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u64, f64)>", into = "Vec<(u64, f64)>")]
pub struct LearningRateSchedule {
    pieces: Vec<(u64, f64)>,
}

impl LearningRateSchedule {
    pub fn new(pieces: Vec<(u64, f64)>) -> Result<Self, NetError> {
        if pieces.first().map(|p| p.0) != Some(0) {
            return Err(NetError::Schedule("first piece must start at iteration 0".into()));
        }
        if pieces.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(NetError::Schedule("start iterations must be strictly increasing".into()));
        }
        if pieces.iter().any(|p| !(p.1.is_finite() && p.1 > 0.0)) {
            return Err(NetError::Schedule("rates must be positive and finite".into()));
        }
        Ok(LearningRateSchedule { pieces })
    }

    pub fn constant(rate: f64) -> Self {
        LearningRateSchedule { pieces: vec![(0, rate)] }
    }

    /// `first` for the first half of `iterations`, `second` afterwards.
    pub fn two_phase(iterations: u64, first: f64, second: f64) -> Self {
        let half = (iterations / 2).max(1);
        LearningRateSchedule { pieces: vec![(0, first), (half, second)] }
    }

    pub fn rate_at(&self, iteration: u64) -> f64 {
        self.pieces.iter().rev().find(|p| p.0 <= iteration).map(|p| p.1).expect("schedule starts at 0")
    }

    pub fn pieces(&self) -> &[(u64, f64)] {
        &self.pieces
    }
}

impl TryFrom<Vec<(u64, f64)>> for LearningRateSchedule {
    type Error = NetError;
    fn try_from(v: Vec<(u64, f64)>) -> Result<Self, NetError> {
        Self::new(v)
    }
}

impl From<LearningRateSchedule> for Vec<(u64, f64)> {
    fn from(s: LearningRateSchedule) -> Self {
        s.pieces
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    schedule: LearningRateSchedule,
    steps: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, schedule: LearningRateSchedule) -> Self {
        Self::with_config(params, schedule, AdamConfig::default())
    }

    pub fn with_config<'a>(
        params: impl IntoIterator<Item = &'a Tensor>,
        schedule: LearningRateSchedule,
        config: AdamConfig,
    ) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = first.clone();
        Adam { config, schedule, steps: 0, first, second }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn current_rate(&self) -> f64 {
        self.schedule.rate_at(self.steps)
    }

    /// One update. Gradients are validated before anything is modified.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], names: &[String]) -> Result<(), NetError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(NetError::ParamCount { expected: self.first.len(), got: params.len().min(grads.len()) });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = || names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            if p.shape() != self.first[i].shape() || g.shape() != p.shape() {
                return Err(NetError::ParamShape {
                    name: name(),
                    expected: self.first[i].shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NetError::NonFiniteGradient { name: name() });
            }
        }
        let lr = self.schedule.rate_at(self.steps);
        self.steps += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((theta, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
