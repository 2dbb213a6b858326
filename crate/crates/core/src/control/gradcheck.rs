use rand::RngCore;

use crate::diffgraph::{relative_error, GraphError, NodeId, Tape, Tensor};
use crate::nets::OutputHead;

use super::{
    rollout_batch, stream_rng, Constraint, ControlError, ControlProblem, ProjectionError, RolloutOptions, Sense,
    StackedPolicy, Stream,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Points whose ReLU or `min{0,·}` inputs come closer than this to the
    /// kink are redrawn.
    pub kink_margin: f64,
    pub max_resamples: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { batch: 4, step: 1e-6, tolerance: 1e-4, kink_margin: 1e-4, max_resamples: 50 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstTensor {
    pub timestep: usize,
    pub name: String,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `‖backward − fd‖ / max(‖backward‖, ‖fd‖)` over all parameters.
    pub relative_error: f64,
    pub passed: bool,
    pub param_count: usize,
    /// Tensor contributing the largest absolute discrepancy.
    pub worst: Option<WorstTensor>,
    pub resamples: usize,
    pub kink_margin: f64,
}

fn loss_at(problem: &dyn ControlProblem, policy: &StackedPolicy, noise: &Tensor) -> Result<f64, ControlError> {
    let graph = rollout_batch(problem, policy, noise, RolloutOptions::train())?;
    Ok(graph.tape.value(graph.loss).data()[0])
}

/// Compares backward gradients of the penalized train-mode batch loss with
/// central finite differences over every parameter of `policy`. Batch
/// statistics are recomputed for every evaluation but never committed.
pub fn check_gradients_at(
    problem: &dyn ControlProblem,
    policy: &StackedPolicy,
    noise: &Tensor,
    options: &GradCheckOptions,
) -> Result<GradCheckReport, ControlError> {
    let graph = rollout_batch(problem, policy, noise, RolloutOptions::train())?;
    let margin = graph.tape.kink_margin();
    let grads = graph.tape.backward(graph.loss)?;

    let mut backward = Vec::new();
    let mut numeric = Vec::new();
    let mut per_tensor = Vec::new();
    for (t, net) in policy.subnets.iter().enumerate() {
        let names = net.param_names();
        for (k, p) in net.params().into_iter().enumerate() {
            let g = graph.params[t].get(k).and_then(|id| grads.get(*id)).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
            let mut fd = Vec::with_capacity(p.numel());
            for i in 0..p.numel() {
                let mut probe = policy.clone();
                let base = probe.subnets[t].params()[k].data()[i];
                probe.subnets[t].params_mut()[k].data_mut()[i] = base + options.step;
                let up = loss_at(problem, &probe, noise)?;
                probe.subnets[t].params_mut()[k].data_mut()[i] = base - options.step;
                let down = loss_at(problem, &probe, noise)?;
                fd.push((up - down) / (2.0 * options.step));
            }
            let diff: f64 = g.data().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            per_tensor.push((diff, t, names[k].clone(), relative_error(g.data(), &fd)));
            backward.extend_from_slice(g.data());
            numeric.extend(fd);
        }
    }
    let err = if backward.is_empty() { 0.0 } else { relative_error(&backward, &numeric) };
    let worst = per_tensor
        .into_iter()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .filter(|w| w.0 > 0.0)
        .map(|(_, timestep, name, relative_error)| WorstTensor { timestep, name, relative_error });
    Ok(GradCheckReport {
        relative_error: err,
        passed: err < options.tolerance,
        param_count: backward.len(),
        worst,
        resamples: 0,
        kink_margin: margin,
    })
}

/// Draws a policy (init stream of `seed`) and a noise batch (train stream),
/// redrawing both while the point sits too close to a kink, then runs
/// [`check_gradients_at`].
pub fn gradient_check(
    problem: &dyn ControlProblem,
    hidden: &[usize],
    use_batchnorm: bool,
    seed: u64,
    options: &GradCheckOptions,
) -> Result<GradCheckReport, ControlError> {
    let mut init_rng = stream_rng(seed, Stream::Init);
    let mut noise_rng = stream_rng(seed, Stream::Train);
    for attempt in 0..=options.max_resamples {
        let policy = StackedPolicy::init(problem, hidden, use_batchnorm, &mut init_rng)?;
        let noise = problem.sample_noise(&mut noise_rng, options.batch);
        let graph = rollout_batch(problem, &policy, &noise, RolloutOptions::train())?;
        if graph.tape.kink_margin() < options.kink_margin && attempt < options.max_resamples {
            continue;
        }
        let mut report = check_gradients_at(problem, &policy, &noise, options)?;
        report.resamples = attempt;
        return Ok(report);
    }
    unreachable!("last attempt always returns")
}

/// Test fixture: wraps a problem and routes every next state through an
/// identity operation whose recorded backward rule doubles the gradient.
pub struct CorruptedBackward<P>(pub P);

impl<P: ControlProblem> ControlProblem for CorruptedBackward<P> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.0.control_dim()
    }
    fn horizon(&self) -> usize {
        self.0.horizon()
    }
    fn noise_dim(&self) -> usize {
        self.0.noise_dim()
    }
    fn initial_state(&self) -> Vec<f64> {
        self.0.initial_state()
    }
    fn sample_noise(&self, rng: &mut dyn RngCore, batch: usize) -> Tensor {
        self.0.sample_noise(rng, batch)
    }
    fn step(&self, t: usize, tape: &mut Tape, s: NodeId, a: NodeId, noise: &Tensor) -> Result<NodeId, GraphError> {
        let next = self.0.step(t, tape, s, a, noise)?;
        let value = tape.value(next).clone();
        tape.custom(&[next], value, Box::new(|_, _, dy| vec![dy.map(|v| 2.0 * v)]))
    }
    fn stage_cost(&self, t: usize, tape: &mut Tape, s: NodeId, a: NodeId) -> Result<NodeId, GraphError> {
        self.0.stage_cost(t, tape, s, a)
    }
    fn terminal_cost(&self, tape: &mut Tape, s: NodeId) -> Result<NodeId, GraphError> {
        self.0.terminal_cost(tape, s)
    }
    fn constraints(&self, t: usize, tape: &mut Tape, s: NodeId, a: NodeId) -> Result<Vec<Constraint>, GraphError> {
        self.0.constraints(t, tape, s, a)
    }
    fn forced_control(&self, t: usize, tape: &mut Tape, s: NodeId) -> Result<Option<NodeId>, GraphError> {
        self.0.forced_control(t, tape, s)
    }
    fn project(&self, t: usize, s: &[f64], a: &[f64]) -> Result<Vec<f64>, ProjectionError> {
        self.0.project(t, s, a)
    }
    fn output_head(&self) -> OutputHead {
        self.0.output_head()
    }
    fn sense(&self) -> Sense {
        self.0.sense()
    }
    fn state_scale(&self) -> Vec<f64> {
        self.0.state_scale()
    }
    fn control_scale(&self) -> Vec<f64> {
        self.0.control_scale()
    }
}
