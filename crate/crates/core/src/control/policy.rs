use crate::diffgraph::{BatchMoments, GraphError, NodeId, Tape, Tensor};
use crate::nets::checkpoint::Checkpoint;
use crate::nets::{Mode, NetError, Subnetwork};

use super::{ControlError, ControlProblem};

/// Controls recorded for one timestep.
#[derive(Debug)]
pub struct ActorOutput {
    pub control: NodeId,
    /// Trainable leaves created for this step, empty for fixed policies.
    pub params: Vec<NodeId>,
    pub moments: Vec<Option<BatchMoments>>,
}

/// Anything that maps `s_t` to `a_t` on a tape.
pub trait Actor {
    fn act(&self, t: usize, tape: &mut Tape, state: NodeId, mode: Mode) -> Result<ActorOutput, ControlError>;
}

/// A fixed feedback rule `(t, states) → controls` evaluated on plain values.
pub struct FnActor<F>(pub F);

impl<F> Actor for FnActor<F>
where
    F: Fn(usize, &Tensor) -> Tensor,
{
    fn act(&self, t: usize, tape: &mut Tape, state: NodeId, _mode: Mode) -> Result<ActorOutput, ControlError> {
        let a = (self.0)(t, tape.value(state));
        Ok(ActorOutput { control: tape.constant(a), params: Vec::new(), moments: Vec::new() })
    }
}

/// One subnetwork per timestep, `a_t = scale_out ⊙ net_t(scale_in ⊙ s_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedPolicy {
    pub subnets: Vec<Subnetwork>,
    pub input_scale: Vec<f64>,
    pub output_scale: Vec<f64>,
    pub use_batchnorm: bool,
    /// The subnetwork consuming the deterministic `s_0` has no batch norm.
    pub skip_first_batchnorm: bool,
}

impl StackedPolicy {
    pub fn init(
        problem: &dyn ControlProblem,
        hidden: &[usize],
        use_batchnorm: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, ControlError> {
        let (m, n) = (problem.state_dim(), problem.control_dim());
        let subnets = (0..problem.horizon())
            .map(|t| Subnetwork::init(m, hidden, n, problem.output_head(), use_batchnorm && t > 0, rng))
            .collect::<Result<Vec<_>, NetError>>()?;
        let input_scale = problem.state_scale().iter().map(|s| 1.0 / s).collect();
        Ok(StackedPolicy {
            subnets,
            input_scale,
            output_scale: problem.control_scale(),
            use_batchnorm,
            skip_first_batchnorm: true,
        })
    }

    pub fn horizon(&self) -> usize {
        self.subnets.len()
    }

    pub fn param_count(&self) -> usize {
        self.subnets.iter().map(|s| s.param_count()).sum()
    }

    /// Names like `t3.layer1.bn.gamma`, in flat parameter order.
    pub fn param_names(&self) -> Vec<String> {
        self.subnets
            .iter()
            .enumerate()
            .flat_map(|(t, s)| s.param_names().into_iter().map(move |n| format!("t{t}.{n}")))
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.subnets.iter().flat_map(|s| s.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.subnets.iter_mut().flat_map(|s| s.params_mut()).collect()
    }

    pub fn commit_moments(&mut self, moments: &[Vec<Option<BatchMoments>>]) {
        for (net, m) in self.subnets.iter_mut().zip(moments) {
            net.commit_moments(m);
        }
    }

    /// Eval-mode controls for plain state values.
    pub fn controls(&self, t: usize, states: &Tensor) -> Result<Tensor, ControlError> {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let out = self.act(t, &mut tape, s, Mode::Eval)?;
        Ok(tape.value(out.control).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            subnets: self.subnets.clone(),
            input_scale: self.input_scale.clone(),
            output_scale: self.output_scale.clone(),
            use_batchnorm: self.use_batchnorm,
            skip_first_batchnorm: self.skip_first_batchnorm,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, ControlError> {
        let policy = StackedPolicy {
            subnets: ckpt.subnets,
            input_scale: ckpt.input_scale,
            output_scale: ckpt.output_scale,
            use_batchnorm: ckpt.use_batchnorm,
            skip_first_batchnorm: ckpt.skip_first_batchnorm,
        };
        policy.validate()?;
        Ok(policy)
    }

    /// Checks that the policy fits `problem`.
    pub fn check_against(&self, problem: &dyn ControlProblem) -> Result<(), ControlError> {
        self.validate()?;
        let (m, n, t) = (problem.state_dim(), problem.control_dim(), problem.horizon());
        if self.horizon() != t || self.input_scale.len() != m || self.output_scale.len() != n {
            return Err(ControlError::Config(format!(
                "policy has {} subnetworks mapping {} → {}, problem needs {t} mapping {m} → {n}",
                self.horizon(),
                self.input_scale.len(),
                self.output_scale.len()
            )));
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ControlError> {
        if self.subnets.is_empty() {
            return Err(ControlError::Config("policy has no subnetworks".into()));
        }
        for (t, net) in self.subnets.iter().enumerate() {
            if net.input_dim() != self.input_scale.len() || net.output_dim() != self.output_scale.len() {
                return Err(ControlError::Config(format!("subnetwork {t} does not match the policy scales")));
            }
        }
        Ok(())
    }
}

impl Actor for StackedPolicy {
    fn act(&self, t: usize, tape: &mut Tape, state: NodeId, mode: Mode) -> Result<ActorOutput, ControlError> {
        let net = &self.subnets[t];
        let x = tape.scale_cols(state, &self.input_scale).map_err(|source| ControlError::Step { t, source })?;
        let use_bn = self.use_batchnorm && !(t == 0 && self.skip_first_batchnorm);
        let out = net.forward_on_tape(tape, x, mode, use_bn).map_err(|e| match e {
            NetError::Graph(source) => ControlError::Step { t, source },
            other => ControlError::Net(other),
        })?;
        let control = tape.scale_cols(out.output, &self.output_scale).map_err(|source: GraphError| ControlError::Step { t, source })?;
        Ok(ActorOutput { control, params: out.params, moments: out.moments })
    }
}
