use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffgraph::{GraphError, Tensor};
use crate::nets::{Adam, LearningRateSchedule, NetError};

use super::rollout::evaluate_chunks;
use super::{
    rollout_batch, stream_rng, ControlError, ControlProblem, PenaltyOverride, RolloutOptions, StackedPolicy, Stream,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: LearningRateSchedule,
    #[serde(default = "default_validation_batch")]
    pub validation_batch_size: usize,
    pub validation_every: u64,
    #[serde(default)]
    pub seed: u64,
    pub hidden: Vec<usize>,
    #[serde(default = "default_true")]
    pub use_batchnorm: bool,
    #[serde(default)]
    pub penalties: PenaltyOverride,
}

fn default_validation_batch() -> usize {
    4096
}

fn default_true() -> bool {
    true
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let fail = |m: &str| Err(ControlError::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.use_batchnorm && self.batch_size < 2 {
            return fail("batch_size must be at least 2 with batch normalization");
        }
        if self.validation_batch_size == 0 {
            return fail("validation_batch_size must be positive");
        }
        if self.validation_every == 0 {
            return fail("validation_every must be positive");
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be positive");
        }
        Ok(())
    }
}

/// One validation point, objectives in natural units.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: u64,
    /// Penalized train-mode objective of the training batch drawn at this
    /// iteration, before the update.
    pub train_objective: f64,
    pub val_objective_penalized: f64,
    pub val_objective_projected: f64,
    /// Largest single constraint violation on the validation set, before
    /// projection.
    pub max_violation: f64,
    /// Mean per-sample summed violation on the validation set, before
    /// projection.
    pub mean_violation: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
    /// Wall-clock seconds since the start of training, per point.
    pub wall_seconds: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: StackedPolicy,
    pub curve: LearningCurve,
}

/// Initializes a policy from the run seed and trains it.
pub fn train(problem: &dyn ControlProblem, config: &TrainingConfig) -> Result<TrainOutcome, ControlError> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, Stream::Init);
    let policy = StackedPolicy::init(problem, &config.hidden, config.use_batchnorm, &mut rng)?;
    train_policy(problem, policy, config)
}

fn is_divergence(e: &ControlError) -> bool {
    matches!(
        e,
        ControlError::Step { source: GraphError::NonFinite { .. }, .. }
            | ControlError::Graph(GraphError::NonFinite { .. })
            | ControlError::Net(NetError::NonFiniteGradient { .. })
    )
}

/// Adam on fresh training batches, validating every `validation_every`
/// iterations and after the last one.
pub fn train_policy(
    problem: &dyn ControlProblem,
    mut policy: StackedPolicy,
    config: &TrainingConfig,
) -> Result<TrainOutcome, ControlError> {
    config.validate()?;
    policy.check_against(problem)?;
    let started = Instant::now();
    let sense = problem.sense();
    let validation_noise = problem.sample_noise(&mut stream_rng(config.seed, Stream::Validation), config.validation_batch_size);
    let mut train_rng = stream_rng(config.seed, Stream::Train);
    let mut adam = Adam::new(policy.params(), config.learning_rate.clone());
    let names = policy.param_names();
    let mut curve = LearningCurve::default();
    let train_options = RolloutOptions { penalties: config.penalties, ..RolloutOptions::train() };

    for iteration in 0..=config.iterations {
        let noise = problem.sample_noise(&mut train_rng, config.batch_size);
        let graph = match rollout_batch(problem, &policy, &noise, train_options) {
            Ok(g) => g,
            Err(e) if is_divergence(&e) => return Err(ControlError::Diverged { iteration, curve: Box::new(curve) }),
            Err(e) => return Err(e),
        };
        let train_cost = graph.tape.value(graph.loss).data()[0];

        if iteration % config.validation_every == 0 || iteration == config.iterations {
            match validate(problem, &policy, &validation_noise, config.penalties) {
                Ok((pen, proj)) if pen.0.is_finite() && proj.is_finite() => {
                    curve.points.push(CurvePoint {
                        iteration,
                        train_objective: sense.natural(train_cost),
                        val_objective_penalized: pen.0,
                        val_objective_projected: proj,
                        max_violation: pen.1,
                        mean_violation: pen.2,
                    });
                    curve.wall_seconds.push(started.elapsed().as_secs_f64());
                }
                Ok(_) => return Err(ControlError::Diverged { iteration, curve: Box::new(curve) }),
                Err(e) if is_divergence(&e) => {
                    return Err(ControlError::Diverged { iteration, curve: Box::new(curve) })
                }
                Err(e) => return Err(e),
            }
        }
        if iteration == config.iterations {
            break;
        }

        let grads = graph.tape.backward(graph.loss)?;
        let mut flat: Vec<Tensor> = Vec::with_capacity(names.len());
        for (t, net) in policy.subnets.iter().enumerate() {
            let ids = &graph.params[t];
            for (k, p) in net.params().into_iter().enumerate() {
                let g = ids.get(k).and_then(|id| grads.get(*id)).cloned();
                flat.push(g.unwrap_or_else(|| Tensor::zeros(p.shape())));
            }
        }
        let grad_refs: Vec<&Tensor> = flat.iter().collect();
        let mut params = policy.params_mut();
        if let Err(e) = adam.step(&mut params, &grad_refs, &names) {
            let e = ControlError::Net(e);
            if is_divergence(&e) {
                return Err(ControlError::Diverged { iteration, curve: Box::new(curve) });
            }
            return Err(e);
        }
        policy.commit_moments(&graph.moments);
    }
    Ok(TrainOutcome { policy, curve })
}

/// Returns `((penalized objective, max violation, mean violation), projected
/// objective)` on the validation noise.
fn validate(
    problem: &dyn ControlProblem,
    policy: &StackedPolicy,
    noise: &Tensor,
    penalties: PenaltyOverride,
) -> Result<((f64, f64, f64), f64), ControlError> {
    let samples = noise.shape()[0];
    let penalized = evaluate_chunks(
        problem,
        policy,
        samples,
        RolloutOptions { penalties, ..RolloutOptions::eval_penalized() },
        |start, rows| noise.slice_rows(start, rows),
    )?;
    let projected =
        evaluate_chunks(problem, policy, samples, RolloutOptions::eval_projected(), |start, rows| {
            noise.slice_rows(start, rows)
        })?;
    Ok(((penalized.mean, penalized.max_violation, penalized.mean_violation), projected.mean))
}
