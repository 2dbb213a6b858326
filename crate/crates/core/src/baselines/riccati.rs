use nalgebra::{DMatrix, DVector};

use super::BaselineError;
use crate::control::FnActor;
use crate::diffgraph::Tensor;
use crate::envs::LqProblem;

/// Finite-horizon discrete Riccati solution, `a_t = −K_t s_t`.
#[derive(Clone, Debug)]
pub struct LqSolution {
    pub gains: Vec<DMatrix<f64>>,
    /// `P_0 … P_T`.
    pub value: Vec<DMatrix<f64>>,
    /// `s_0ᵀP_0 s_0 + Σ_t tr(P_{t+1}Σ)`.
    pub cost: f64,
}

pub fn lq_riccati(problem: &LqProblem) -> Result<LqSolution, BaselineError> {
    let (f, g) = (&problem.f, &problem.g);
    let horizon = problem.def.horizon;
    if problem.r.clone().cholesky().is_none() {
        return Err(BaselineError::Invalid("lq: r is singular".into()));
    }
    let mut p = problem.q_terminal.clone();
    let mut value = vec![p.clone()];
    let mut gains = Vec::with_capacity(horizon);
    let mut noise = 0.0;
    for t in (0..horizon).rev() {
        noise += (&p * &problem.noise_cov).trace();
        let gp = g.transpose() * &p;
        let s = &problem.r + &gp * g;
        let chol = s
            .cholesky()
            .ok_or_else(|| BaselineError::Invalid(format!("lq: R + GᵀPG not positive definite at t = {t}")))?;
        let k = chol.solve(&(&gp * f));
        let next = &problem.q + f.transpose() * &p * f - f.transpose() * &p * g * &k;
        p = (&next + next.transpose()) * 0.5;
        value.push(p.clone());
        gains.push(k);
    }
    value.reverse();
    gains.reverse();
    let s0 = DVector::from_column_slice(&problem.def.initial_state);
    let cost = (s0.transpose() * &value[0] * &s0)[0] + noise;
    Ok(LqSolution { gains, value, cost })
}

impl LqSolution {
    pub fn control(&self, t: usize, s: &[f64]) -> Vec<f64> {
        let a = -(&self.gains[t] * DVector::from_column_slice(s));
        a.iter().copied().collect()
    }

    pub fn actor(&self) -> FnActor<impl Fn(usize, &Tensor) -> Tensor + '_> {
        FnActor(move |t: usize, states: &Tensor| {
            let data = (0..states.rows()).flat_map(|i| self.control(t, states.row(i))).collect();
            Tensor::new(vec![states.rows(), self.gains[t].nrows()], data).expect("positive extents")
        })
    }
}
