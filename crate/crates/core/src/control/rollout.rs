use crate::diffgraph::{BatchMoments, GraphError, NodeId, Tape, Tensor};
use crate::nets::Mode;

use super::{
    penalty_node, stream_rng, violations, Actor, ControlError, ControlProblem, PenaltyOverride, Stream,
    FEASIBILITY_TOLERANCE,
};

/// Rows per rollout when evaluating large sample sets.
pub const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutOptions {
    pub mode: Mode,
    /// Add constraint penalties to the cumulative cost.
    pub penalized: bool,
    /// Replace each control by its projection onto the admissible set.
    pub project: bool,
    pub penalties: PenaltyOverride,
}

impl RolloutOptions {
    pub fn train() -> Self {
        RolloutOptions { mode: Mode::Train, penalized: true, project: false, penalties: PenaltyOverride::default() }
    }

    pub fn eval_penalized() -> Self {
        RolloutOptions { mode: Mode::Eval, ..Self::train() }
    }

    pub fn eval_projected() -> Self {
        RolloutOptions { mode: Mode::Eval, penalized: false, project: true, penalties: PenaltyOverride::default() }
    }
}

/// Per-sample outcome of one rollout, in the internal cost convention.
#[derive(Clone, Debug)]
pub struct RolloutResult {
    /// `C_T` per sample.
    pub total_cost: Vec<f64>,
    /// `C_t` for `t = 0 … T`; entry `T` equals `total_cost`.
    pub cumulative: Vec<Vec<f64>>,
    /// `c_t(s_t, a_t)` for `t < T`, without penalties.
    pub stage_costs: Vec<Vec<f64>>,
    pub terminal_cost: Vec<f64>,
    /// Penalty at each `t < T`, whether or not it entered the cost.
    pub step_penalties: Vec<Vec<f64>>,
    /// `s_0 … s_T`, each `[batch, state_dim]`.
    pub states: Vec<Tensor>,
    /// `a_0 … a_{T-1}` as applied, each `[batch, control_dim]`.
    pub controls: Vec<Tensor>,
    /// Whether `a_t` was imposed by the model rather than the actor.
    pub forced: Vec<bool>,
    pub violation_sum: Vec<f64>,
    pub violation_max: Vec<f64>,
    /// `(sample, t, reason)` for every failed projection.
    pub projection_failures: Vec<(usize, usize, String)>,
}

impl RolloutResult {
    pub fn batch(&self) -> usize {
        self.total_cost.len()
    }

    pub fn penalties(&self) -> Vec<f64> {
        (0..self.batch()).map(|i| self.step_penalties.iter().map(|p| p[i]).sum()).collect()
    }
}

/// The recorded graph of a rollout.
pub struct RolloutGraph {
    pub tape: Tape,
    /// Batch mean of `C_T`, a one-element node.
    pub loss: NodeId,
    pub result: RolloutResult,
    /// Trainable leaves per timestep, in actor parameter order.
    pub params: Vec<Vec<NodeId>>,
    pub moments: Vec<Vec<Option<BatchMoments>>>,
}

/// Slice `t` of a `[batch, T, d]` noise tensor as `[batch, d]`.
pub fn noise_at(noise: &Tensor, t: usize) -> Tensor {
    let (b, horizon, d) = (noise.shape()[0], noise.shape()[1], noise.shape()[2]);
    let mut out = Vec::with_capacity(b * d);
    for i in 0..b {
        let start = (i * horizon + t) * d;
        out.extend_from_slice(&noise.data()[start..start + d]);
    }
    Tensor::new(vec![b, d], out).expect("positive extents")
}

fn rows_of(t: &Tensor, batch: usize) -> Vec<Vec<f64>> {
    t.data().chunks(t.numel() / batch).map(|r| r.to_vec()).collect()
}

/// Simulates `s_0 → a_0 → s_1 → … → s_T` for every noise sample, recording
/// the whole computation on one tape.
pub fn rollout_batch(
    problem: &dyn ControlProblem,
    actor: &dyn Actor,
    noise: &Tensor,
    options: RolloutOptions,
) -> Result<RolloutGraph, ControlError> {
    let horizon = problem.horizon();
    let (m, n) = (problem.state_dim(), problem.control_dim());
    if noise.rank() != 3 || noise.shape()[1] != horizon || noise.shape()[2] != problem.noise_dim() {
        return Err(ControlError::Shape {
            t: 0,
            what: "noise",
            got: noise.shape().to_vec(),
            expected: vec![noise.shape()[0], horizon, problem.noise_dim()],
        });
    }
    let batch = noise.shape()[0];
    let step_err = |t: usize| move |source: GraphError| ControlError::Step { t, source };

    let mut tape = Tape::new();
    let s0 = problem.initial_state();
    let mut state = tape.constant(Tensor::from_rows(&vec![s0; batch])?);
    let mut cum = tape.constant(Tensor::zeros(&[batch, 1]));

    let mut states = vec![tape.value(state).clone()];
    let mut controls = Vec::with_capacity(horizon);
    let mut forced = Vec::with_capacity(horizon);
    let mut cumulative = Vec::with_capacity(horizon + 1);
    let mut stage_costs = Vec::with_capacity(horizon);
    let mut step_penalties = Vec::with_capacity(horizon);
    let mut params = Vec::with_capacity(horizon);
    let mut moments = Vec::with_capacity(horizon);
    let mut violation_sum = vec![0.0; batch];
    let mut violation_max = vec![0.0f64; batch];
    let mut projection_failures = Vec::new();

    for t in 0..horizon {
        let imposed = problem.forced_control(t, &mut tape, state).map_err(step_err(t))?;
        let mut control = match imposed {
            Some(a) => {
                params.push(Vec::new());
                moments.push(Vec::new());
                a
            }
            None => {
                let out = actor.act(t, &mut tape, state, options.mode)?;
                params.push(out.params);
                moments.push(out.moments);
                out.control
            }
        };
        forced.push(imposed.is_some());
        if tape.shape(control) != [batch, n] {
            return Err(ControlError::Shape {
                t,
                what: "control",
                got: tape.shape(control).to_vec(),
                expected: vec![batch, n],
            });
        }
        if options.project {
            let s_rows = rows_of(tape.value(state), batch);
            let a_rows = rows_of(tape.value(control), batch);
            let mut projected = Vec::with_capacity(batch);
            for (i, (s, a)) in s_rows.iter().zip(a_rows).enumerate() {
                match problem.project(t, s, &a) {
                    Ok(p) => projected.push(p),
                    Err(e) => {
                        projection_failures.push((i, t, e.0));
                        projected.push(a);
                    }
                }
            }
            control = tape.constant(Tensor::from_rows(&projected)?);
        }

        let cost = problem.stage_cost(t, &mut tape, state, control).map_err(step_err(t))?;
        stage_costs.push(tape.value(cost).data().to_vec());
        cum = tape.add(cum, cost).map_err(step_err(t))?;

        let cons = problem.constraints(t, &mut tape, state, control).map_err(step_err(t))?;
        let (vs, vm) = violations(&tape, &cons, batch);
        for i in 0..batch {
            violation_sum[i] += vs[i];
            violation_max[i] = violation_max[i].max(vm[i]);
        }
        match penalty_node(&mut tape, &cons, &options.penalties)? {
            Some(pen) => {
                step_penalties.push(tape.value(pen).data().to_vec());
                if options.penalized {
                    cum = tape.add(cum, pen).map_err(step_err(t))?;
                }
            }
            None => step_penalties.push(vec![0.0; batch]),
        }
        cumulative.push(tape.value(cum).data().to_vec());

        controls.push(tape.value(control).clone());
        state = problem.step(t, &mut tape, state, control, &noise_at(noise, t)).map_err(step_err(t))?;
        if tape.shape(state) != [batch, m] {
            return Err(ControlError::Shape {
                t,
                what: "state",
                got: tape.shape(state).to_vec(),
                expected: vec![batch, m],
            });
        }
        states.push(tape.value(state).clone());
    }

    let terminal = problem.terminal_cost(&mut tape, state).map_err(step_err(horizon))?;
    let terminal_cost = tape.value(terminal).data().to_vec();
    cum = tape.add(cum, terminal).map_err(step_err(horizon))?;
    let total_cost = tape.value(cum).data().to_vec();
    cumulative.push(total_cost.clone());
    let loss = tape.mean_rows(cum).map_err(step_err(horizon))?;

    Ok(RolloutGraph {
        tape,
        loss,
        result: RolloutResult {
            total_cost,
            cumulative,
            stage_costs,
            terminal_cost,
            step_penalties,
            states,
            controls,
            forced,
            violation_sum,
            violation_max,
            projection_failures,
        },
        params,
        moments,
    })
}

/// Summary of an evaluation over many samples, in natural units (cost for
/// minimization, reward for maximization).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub mean: f64,
    pub std_error: f64,
    /// Per-sample objective, in sample order.
    pub values: Vec<f64>,
    pub max_violation: f64,
    pub mean_violation: f64,
    pub projection_failures: usize,
    pub failure_examples: Vec<String>,
}

impl EvalReport {
    pub fn feasible(&self) -> bool {
        self.projection_failures == 0 && self.max_violation <= FEASIBILITY_TOLERANCE
    }
}

pub(crate) fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Rolls out `samples` noise draws in chunks, `next_noise(rows)` supplying each
/// chunk, and aggregates the results.
pub(crate) fn evaluate_chunks(
    problem: &dyn ControlProblem,
    actor: &dyn Actor,
    samples: usize,
    options: RolloutOptions,
    mut next_noise: impl FnMut(usize, usize) -> Tensor,
) -> Result<EvalReport, ControlError> {
    if samples == 0 {
        return Err(ControlError::Config("evaluation needs at least one sample".into()));
    }
    let sense = problem.sense();
    let mut values = Vec::with_capacity(samples);
    let mut max_violation = 0.0f64;
    let mut violation_total = 0.0;
    let mut failures = 0;
    let mut failure_examples = Vec::new();
    let mut start = 0;
    while start < samples {
        let rows = EVAL_CHUNK.min(samples - start);
        let noise = next_noise(start, rows);
        let graph = rollout_batch(problem, actor, &noise, options)?;
        let r = graph.result;
        values.extend(r.total_cost.iter().map(|c| sense.natural(*c)));
        max_violation = r.violation_max.iter().fold(max_violation, |a, b| a.max(*b));
        violation_total += r.violation_sum.iter().sum::<f64>();
        failures += r.projection_failures.len();
        for (i, t, why) in r.projection_failures.into_iter().take(5usize.saturating_sub(failure_examples.len())) {
            failure_examples.push(format!("sample {} t {t}: {why}", start + i));
        }
        start += rows;
    }
    let (mean, std_error) = mean_and_se(&values);
    Ok(EvalReport {
        samples,
        mean,
        std_error,
        values,
        max_violation,
        mean_violation: violation_total / samples as f64,
        projection_failures: failures,
        failure_examples,
    })
}

/// Projected, penalty-free evaluation in eval mode on the test noise stream
/// of `seed`.
pub fn evaluate(
    problem: &dyn ControlProblem,
    actor: &dyn Actor,
    samples: usize,
    seed: u64,
) -> Result<EvalReport, ControlError> {
    let mut rng = stream_rng(seed, Stream::Test);
    evaluate_chunks(problem, actor, samples, RolloutOptions::eval_projected(), |_, rows| {
        problem.sample_noise(&mut rng, rows)
    })
}
