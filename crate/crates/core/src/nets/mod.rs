//! Per-timestep feedforward subnetworks: dense layers, batch normalization,
//! initialization, the Adam optimizer and the parameter checkpoint format.

mod adam;
pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{BatchMoments, GraphError, NodeId, Tape, Tensor};

pub use adam::{Adam, AdamConfig, LearningRateSchedule};

/// Running-average rate for the moving batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.99;
/// Variance floor inside the batch-norm square root.
pub const BN_EPSILON: f64 = 1e-5;
/// Initial output bias of a nonnegative head, in control-scale units.
pub const NONNEGATIVE_HEAD_BIAS: f64 = 0.5;
/// Factor applied to the initial output weights of a nonnegative head.
pub const NONNEGATIVE_HEAD_WEIGHT_SCALE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("layer widths must be positive, got {widths:?}")]
    ZeroWidth { widths: Vec<usize> },
    #[error("train-mode batch normalization needs at least 2 samples, got {batch}")]
    BatchTooSmall { batch: usize },
    #[error("non-finite gradient in parameter tensor `{name}`")]
    NonFiniteGradient { name: String },
    #[error("optimizer expected {expected} tensors, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("shape mismatch for `{name}`: {expected:?} vs {got:?}")]
    ParamShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid learning-rate schedule: {0}")]
    Schedule(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics in batch norm; moving statistics are updated.
    Train,
    /// Moving statistics; nothing is mutated.
    Eval,
}

/// Activation applied after the output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    Linear,
    Nonnegative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub moving_mean: Vec<f64>,
    pub moving_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new(width: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::full(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
            moving_mean: vec![0.0; width],
            moving_var: vec![1.0; width],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn width(&self) -> usize {
        self.moving_mean.len()
    }

    /// Folds one batch's statistics into the moving averages.
    pub fn commit(&mut self, moments: &BatchMoments) {
        let m = self.momentum;
        for (mm, bm) in self.moving_mean.iter_mut().zip(&moments.mean) {
            *mm = m * *mm + (1.0 - m) * bm;
        }
        for (mv, bv) in self.moving_var.iter_mut().zip(&moments.var) {
            *mv = m * *mv + (1.0 - m) * bv;
        }
    }

    fn record(&self, tape: &mut Tape, x: NodeId, mode: Mode) -> Result<(NodeId, [NodeId; 2], Option<BatchMoments>), NetError> {
        let gamma = tape.variable(self.gamma.clone());
        let beta = tape.variable(self.beta.clone());
        match mode {
            Mode::Train => {
                let batch = tape.shape(x)[0];
                if batch < 2 {
                    return Err(NetError::BatchTooSmall { batch });
                }
                let (y, moments) = tape.batch_norm_train(x, gamma, beta, self.epsilon)?;
                Ok((y, [gamma, beta], Some(moments)))
            }
            Mode::Eval => {
                let y = tape.batch_norm_eval(x, gamma, beta, &self.moving_mean, &self.moving_var, self.epsilon)?;
                Ok((y, [gamma, beta], None))
            }
        }
    }

    /// Normalizes a `[batch, width]` tensor; train mode also updates the
    /// moving statistics.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NetError> {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let (y, _, moments) = self.record(&mut tape, xn, mode)?;
        if let Some(m) = moments {
            self.commit(&m);
        }
        Ok(tape.value(y).clone())
    }
}

/// Dense map, optional batch norm, optional ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub dense: DenseLayer,
    pub batch_norm: Option<BatchNormLayer>,
    pub relu: bool,
}

/// Feedforward network `s → h¹ → … → hᴺ → a` approximating the control at one
/// timestep. Hidden layers are dense → batch norm → ReLU; the output layer is
/// dense, followed by a ReLU only for a nonnegative head.
#[derive(Clone, Debug, PartialEq)]
pub struct Subnetwork {
    pub layers: Vec<Layer>,
    pub head: OutputHead,
}

/// Result of recording a subnetwork forward pass on a tape.
#[derive(Debug)]
pub struct TapeForward {
    pub output: NodeId,
    /// Leaf ids in [`Subnetwork::params`] order.
    pub params: Vec<NodeId>,
    /// Batch statistics per layer (train mode only).
    pub moments: Vec<Option<BatchMoments>>,
}

impl Subnetwork {
    /// Weights are drawn i.i.d. from `N(0, 2 / fan_in)`, biases are zero and
    /// batch norm starts at `gamma = 1, beta = 0`, moving mean 0, variance 1.
    /// A nonnegative head starts with a positive output bias and shrunken
    /// output weights so no output unit starts dead.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        head: OutputHead,
        batch_norm: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, NetError> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(output_dim);
        if widths.iter().any(|&w| w == 0) {
            return Err(NetError::ZeroWidth { widths });
        }
        let n_layers = widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (k, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let is_output = k + 1 == n_layers;
            let mut std = (2.0 / fan_in as f64).sqrt();
            let mut bias = 0.0;
            if is_output && head == OutputHead::Nonnegative {
                std *= NONNEGATIVE_HEAD_WEIGHT_SCALE;
                bias = NONNEGATIVE_HEAD_BIAS;
            }
            let normal = Normal::new(0.0, std).expect("finite std");
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            layers.push(Layer {
                dense: DenseLayer {
                    weight: Tensor::from_parts(vec![fan_out, fan_in], w),
                    bias: Tensor::full(&[fan_out], bias),
                },
                batch_norm: (!is_output && batch_norm).then(|| BatchNormLayer::new(fan_out)),
                relu: !is_output || head == OutputHead::Nonnegative,
            });
        }
        Ok(Subnetwork { layers, head })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].dense.in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").dense.out_dim()
    }

    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.batch_norm.is_some())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.dense.weight);
            out.push(&l.dense.bias);
            if let Some(bn) = &l.batch_norm {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.dense.weight);
            out.push(&mut l.dense.bias);
            if let Some(bn) = &mut l.batch_norm {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            out.push(format!("layer{k}.weight"));
            out.push(format!("layer{k}.bias"));
            if l.batch_norm.is_some() {
                out.push(format!("layer{k}.bn.gamma"));
                out.push(format!("layer{k}.bn.beta"));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Records the forward pass on `tape`. Parameters become tape variables;
    /// nothing in `self` is mutated, so callers decide whether to
    /// [`commit`](Self::commit_moments) the batch statistics.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mode: Mode,
        use_batchnorm: bool,
    ) -> Result<TapeForward, NetError> {
        let mut h = x;
        let mut params = Vec::new();
        let mut moments = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = tape.variable(layer.dense.weight.clone());
            let b = tape.variable(layer.dense.bias.clone());
            params.extend([w, b]);
            h = tape.affine(h, w, b)?;
            let mut m = None;
            if let Some(bn) = &layer.batch_norm {
                if use_batchnorm {
                    let (y, ids, bm) = bn.record(tape, h, mode)?;
                    h = y;
                    params.extend(ids);
                    m = bm;
                } else {
                    // Parameters still get leaves so ids line up with params().
                    params.push(tape.variable(bn.gamma.clone()));
                    params.push(tape.variable(bn.beta.clone()));
                }
            }
            moments.push(m);
            if layer.relu {
                h = tape.relu(h)?;
            }
        }
        Ok(TapeForward { output: h, params, moments })
    }

    pub fn commit_moments(&mut self, moments: &[Option<BatchMoments>]) {
        for (layer, m) in self.layers.iter_mut().zip(moments) {
            if let (Some(bn), Some(m)) = (&mut layer.batch_norm, m) {
                bn.commit(m);
            }
        }
    }

    /// Forward pass on a `[batch, input_dim]` tensor. Train mode updates the
    /// moving statistics; eval mode leaves the network untouched.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, use_batchnorm: bool) -> Result<Tensor, NetError> {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, xn, mode, use_batchnorm)?;
        if mode == Mode::Train {
            self.commit_moments(&out.moments);
        }
        Ok(tape.value(out.output).clone())
    }

    /// Eval-mode forward pass through a shared reference.
    pub fn forward_eval(&self, x: &Tensor, use_batchnorm: bool) -> Result<Tensor, NetError> {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, xn, Mode::Eval, use_batchnorm)?;
        Ok(tape.value(out.output).clone())
    }
}

/// Builds a subnetwork from a seed, with batch norm on every hidden layer.
pub fn init_subnetwork(
    input_dim: usize,
    hidden: &[usize],
    output_dim: usize,
    head: OutputHead,
    seed: u64,
) -> Result<Subnetwork, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Subnetwork::init(input_dim, hidden, output_dim, head, true, &mut rng)
}
