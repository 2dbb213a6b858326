//! Stacked-network solver for finite-horizon stochastic control.
//!
//! A [`ControlProblem`] describes dynamics, costs and constraints as tape
//! operations. [`StackedPolicy`] holds one subnetwork per timestep;
//! [`rollout_batch`] chains them through the dynamics into a single graph
//! whose mean terminal cumulative cost is differentiated by [`train`].

mod gradcheck;
mod policy;
mod rollout;
mod train;

#[cfg(test)]
mod tests;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{GraphError, NodeId, Tape, Tensor};
use crate::nets::{NetError, OutputHead};

pub use gradcheck::{check_gradients_at, gradient_check, CorruptedBackward, GradCheckOptions, GradCheckReport, WorstTensor};
pub use policy::{Actor, ActorOutput, FnActor, StackedPolicy};
pub use rollout::{evaluate, noise_at, rollout_batch, EvalReport, RolloutGraph, RolloutOptions, RolloutResult};
pub use train::{train, train_policy, CurvePoint, LearningCurve, TrainOutcome, TrainingConfig};

/// Post-projection feasibility tolerance.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("timestep {t}: {source}")]
    Step { t: usize, source: GraphError },
    #[error("timestep {t}: {what} has shape {got:?}, expected {expected:?}")]
    Shape { t: usize, what: &'static str, got: Vec<usize>, expected: Vec<usize> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("negative penalty coefficient {value} on constraint `{name}`")]
    NegativePenalty { name: String, value: f64 },
    #[error("validation objective is not finite at iteration {iteration}")]
    Diverged { iteration: u64, curve: Box<LearningCurve> },
    #[error("benchmark value is zero")]
    ZeroBenchmark,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{0}")]
pub struct ProjectionError(pub String);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Minimize,
    Maximize,
}

impl Sense {
    /// Converts an internal cost (always minimized) to the problem's natural
    /// objective: a cost for minimization, a reward for maximization.
    pub fn natural(self, cost: f64) -> f64 {
        match self {
            Sense::Minimize => cost,
            Sense::Maximize => -cost,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintKind {
    /// `g(s, a) = 0`
    Equality,
    /// `h(s, a) ≥ 0`
    Inequality,
}

/// A family of constraints at one timestep, as a `[batch, k]` node.
#[derive(Clone, Debug)]
pub struct Constraint {
    pub name: &'static str,
    pub kind: ConstraintKind,
    pub values: NodeId,
    pub coefficient: f64,
}

/// Replaces the problem's default penalty coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyOverride {
    pub equality: Option<f64>,
    pub inequality: Option<f64>,
}

impl PenaltyOverride {
    pub fn coefficient(&self, c: &Constraint) -> f64 {
        match c.kind {
            ConstraintKind::Equality => self.equality.unwrap_or(c.coefficient),
            ConstraintKind::Inequality => self.inequality.unwrap_or(c.coefficient),
        }
    }
}

/// Environment contract. States are `[batch, state_dim]` nodes, controls
/// `[batch, control_dim]`, costs `[batch, 1]`. Internally every problem is a
/// minimization; reward problems return negated rewards and report
/// [`Sense::Maximize`].
pub trait ControlProblem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn initial_state(&self) -> Vec<f64>;

    /// Noise for a whole rollout, shape `[batch, horizon, noise_dim]`; slice
    /// `t` drives the transition from `s_t` to `s_{t+1}`.
    fn sample_noise(&self, rng: &mut dyn RngCore, batch: usize) -> Tensor;

    fn step(&self, t: usize, tape: &mut Tape, state: NodeId, control: NodeId, noise: &Tensor)
        -> Result<NodeId, GraphError>;

    fn stage_cost(&self, t: usize, tape: &mut Tape, state: NodeId, control: NodeId) -> Result<NodeId, GraphError>;

    fn terminal_cost(&self, tape: &mut Tape, state: NodeId) -> Result<NodeId, GraphError>;

    fn constraints(
        &self,
        _t: usize,
        _tape: &mut Tape,
        _state: NodeId,
        _control: NodeId,
    ) -> Result<Vec<Constraint>, GraphError> {
        Ok(Vec::new())
    }

    /// Control imposed by the model at step `t`, bypassing the subnetwork.
    fn forced_control(&self, _t: usize, _tape: &mut Tape, _state: NodeId) -> Result<Option<NodeId>, GraphError> {
        Ok(None)
    }

    /// Maps one raw control to the admissible set at `state`.
    fn project(&self, _t: usize, _state: &[f64], control: &[f64]) -> Result<Vec<f64>, ProjectionError> {
        Ok(control.to_vec())
    }

    fn output_head(&self) -> OutputHead {
        OutputHead::Linear
    }

    fn sense(&self) -> Sense {
        Sense::Minimize
    }

    /// Typical magnitude of each state coordinate; subnetworks see `s / scale`.
    fn state_scale(&self) -> Vec<f64> {
        vec![1.0; self.state_dim()]
    }

    /// Typical magnitude of each control coordinate; subnetwork outputs are
    /// multiplied by it.
    fn control_scale(&self) -> Vec<f64> {
        vec![1.0; self.control_dim()]
    }
}

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Train = 1,
    Validation = 2,
    Test = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Records the quadratic penalty `Σ λ g² + Σ σ (min{0, h})²` of the given
/// constraints as a `[batch, 1]` node, or `None` when there are none.
pub fn penalty_node(
    tape: &mut Tape,
    constraints: &[Constraint],
    overrides: &PenaltyOverride,
) -> Result<Option<NodeId>, ControlError> {
    let mut total: Option<NodeId> = None;
    for c in constraints {
        let coef = overrides.coefficient(c);
        if !(coef >= 0.0) {
            return Err(ControlError::NegativePenalty { name: c.name.to_string(), value: coef });
        }
        let v = match c.kind {
            ConstraintKind::Equality => c.values,
            ConstraintKind::Inequality => tape.min_zero(c.values)?,
        };
        let sq = tape.square(v)?;
        let summed = tape.sum_cols(sq)?;
        let term = tape.scale(summed, coef)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Per-sample violation: `|g|` for equalities and `max{0, −h}` for
/// inequalities. Returns `(sum, max)` over all entries of each row.
pub fn violations(tape: &Tape, constraints: &[Constraint], batch: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; batch];
    let mut max = vec![0.0f64; batch];
    for c in constraints {
        let v = tape.value(c.values);
        let k = v.cols();
        for (i, row) in v.data().chunks(k).enumerate() {
            for x in row {
                let viol = match c.kind {
                    ConstraintKind::Equality => x.abs(),
                    ConstraintKind::Inequality => (-x).max(0.0),
                };
                sum[i] += viol;
                max[i] = max[i].max(viol);
            }
        }
    }
    (sum, max)
}

/// Penalty of a single `(state, control)` pair at timestep `t`.
pub fn apply_penalties(
    problem: &dyn ControlProblem,
    t: usize,
    state: &[f64],
    control: &[f64],
    overrides: &PenaltyOverride,
) -> Result<f64, ControlError> {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_rows(&[state.to_vec()])?);
    let a = tape.constant(Tensor::from_rows(&[control.to_vec()])?);
    let cons = problem.constraints(t, &mut tape, s, a).map_err(|source| ControlError::Step { t, source })?;
    Ok(match penalty_node(&mut tape, &cons, overrides)? {
        Some(p) => tape.value(p).data()[0],
        None => 0.0,
    })
}

/// `candidate / benchmark`. For minimization 1.0 is reached from above, for
/// maximization from below.
pub fn relative_metric(candidate: f64, benchmark: f64, _sense: Sense) -> Result<f64, ControlError> {
    if benchmark == 0.0 {
        return Err(ControlError::ZeroBenchmark);
    }
    Ok(candidate / benchmark)
}
