use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_psd, check_square, mat_tensor, matrix, psd_factor, EnvError};
use crate::control::ControlProblem;
use crate::diffgraph::{GraphError, NodeId, Tape, Tensor};

/// `s' = F s + G a + ξ`, `ξ ~ N(0, Σ)`, costs `sᵀQs + aᵀRa` and `s_TᵀQ_T s_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqDefinition {
    pub horizon: usize,
    pub f: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub q_terminal: Vec<Vec<f64>>,
    pub noise_cov: Vec<Vec<f64>>,
    pub initial_state: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LqProblem {
    pub def: LqDefinition,
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
    noise_chol: DMatrix<f64>,
    f_t: Tensor,
    g_t: Tensor,
    q_t: Tensor,
    r_t: Tensor,
    qt_t: Tensor,
}

impl LqProblem {
    pub fn new(def: LqDefinition) -> Result<Self, EnvError> {
        let m = def.initial_state.len();
        if m == 0 || def.horizon == 0 {
            return Err(EnvError::Invalid("lq: empty state or zero horizon".into()));
        }
        let f = matrix("f", &def.f)?;
        let g = matrix("g", &def.g)?;
        let q = matrix("q", &def.q)?;
        let r = matrix("r", &def.r)?;
        let q_terminal = matrix("q_terminal", &def.q_terminal)?;
        let noise_cov = matrix("noise_cov", &def.noise_cov)?;
        let n = g.ncols();
        check_square("f", &f, m)?;
        if g.nrows() != m {
            return Err(EnvError::Invalid(format!("lq: g has {} rows, expected {m}", g.nrows())));
        }
        check_square("q", &q, m)?;
        check_square("r", &r, n)?;
        check_square("q_terminal", &q_terminal, m)?;
        check_square("noise_cov", &noise_cov, m)?;
        check_psd("q", &q)?;
        check_psd("q_terminal", &q_terminal)?;
        check_psd("noise_cov", &noise_cov)?;
        if r.clone().cholesky().is_none() || (&r - r.transpose()).amax() > 1e-12 * r.amax().max(1.0) {
            return Err(EnvError::Invalid("lq: r must be symmetric positive definite".into()));
        }
        let noise_chol = psd_factor(&noise_cov);
        Ok(LqProblem {
            f_t: mat_tensor(&f.transpose()),
            g_t: mat_tensor(&g.transpose()),
            q_t: mat_tensor(&q),
            r_t: mat_tensor(&r),
            qt_t: mat_tensor(&q_terminal),
            f,
            g,
            q,
            r,
            q_terminal,
            noise_cov,
            noise_chol,
            def,
        })
    }

    /// Noise slice `[batch, m]` of standard normals mapped to `N(0, Σ)`.
    pub fn scaled_noise(&self, noise: &Tensor) -> Tensor {
        let z = DMatrix::from_row_slice(noise.rows(), noise.cols(), noise.data());
        mat_tensor(&(z * self.noise_chol.transpose()))
    }
}

fn quadratic(tape: &mut Tape, x: NodeId, m: &Tensor) -> Result<NodeId, GraphError> {
    let mc = tape.constant(m.clone());
    let xm = tape.matmul(x, mc)?;
    let prod = tape.mul(xm, x)?;
    tape.sum_cols(prod)
}

impl ControlProblem for LqProblem {
    fn state_dim(&self) -> usize {
        self.f.nrows()
    }
    fn control_dim(&self) -> usize {
        self.g.ncols()
    }
    fn horizon(&self) -> usize {
        self.def.horizon
    }
    fn noise_dim(&self) -> usize {
        self.state_dim()
    }
    fn initial_state(&self) -> Vec<f64> {
        self.def.initial_state.clone()
    }
    fn sample_noise(&self, rng: &mut dyn RngCore, batch: usize) -> Tensor {
        let (t, m) = (self.horizon(), self.state_dim());
        let data = (0..batch * t * m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(vec![batch, t, m], data).expect("positive extents")
    }
    fn step(&self, _t: usize, tape: &mut Tape, s: NodeId, a: NodeId, noise: &Tensor) -> Result<NodeId, GraphError> {
        let ft = tape.constant(self.f_t.clone());
        let gt = tape.constant(self.g_t.clone());
        let fs = tape.matmul(s, ft)?;
        let ga = tape.matmul(a, gt)?;
        let drift = tape.add(fs, ga)?;
        let xi = tape.constant(self.scaled_noise(noise));
        tape.add(drift, xi)
    }
    fn stage_cost(&self, _t: usize, tape: &mut Tape, s: NodeId, a: NodeId) -> Result<NodeId, GraphError> {
        let sq = quadratic(tape, s, &self.q_t)?;
        let ar = quadratic(tape, a, &self.r_t)?;
        tape.add(sq, ar)
    }
    fn terminal_cost(&self, tape: &mut Tape, s: NodeId) -> Result<NodeId, GraphError> {
        quadratic(tape, s, &self.qt_t)
    }
}

/// Plain-value stage cost, for oracles and tests.
pub fn lq_stage_cost(p: &LqProblem, s: &[f64], a: &[f64]) -> f64 {
    let s = nalgebra::DVector::from_column_slice(s);
    let a = nalgebra::DVector::from_column_slice(a);
    (s.transpose() * &p.q * &s)[0] + (a.transpose() * &p.r * &a)[0]
}
