use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BaselineError;
use crate::control::{ControlProblem, FnActor, RolloutResult};
use crate::diffgraph::Tensor;
use crate::envs::ExecutionModel;

/// Value `V_t = vᵀ M_t v` over `v = (z, x, 1)` with `z = P̃w` the dollar value
/// of the remaining shares, and the optimal dollar trade `y_t = K_t v`
/// (`a_t = P̃⁻¹ y_t`). `gains` has `T − 1` entries; the last trade is forced.
#[derive(Clone, Debug)]
pub struct QuadraticValue {
    pub value: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub struct ExecutionOracle {
    pub quadratic: QuadraticValue,
    /// Expected optimal cost from the initial state.
    pub cost: f64,
    pub no_impact_cost: f64,
    /// Largest relative ansatz residual seen on the sampled states.
    pub residual: f64,
    stocks: usize,
    factors: usize,
    horizon: usize,
}

/// Index ranges of `(z, x, 1, y)` inside the stacked vector.
struct Blocks {
    n: usize,
    m: usize,
}

impl Blocks {
    fn z(&self) -> usize {
        0
    }
    fn x(&self) -> usize {
        self.n
    }
    fn one(&self) -> usize {
        self.n + self.m
    }
    fn y(&self) -> usize {
        self.n + self.m + 1
    }
    fn state(&self) -> usize {
        self.n + self.m + 1
    }
}

const RESIDUAL_TOLERANCE: f64 = 1e-8;

/// Backward induction on the quadratic ansatz. At `T − 1` the trade is the
/// remainder, so `V_{T−1} = 1ᵀz + zᵀAz + zᵀBx`. Earlier, minimizing
/// `1ᵀy + yᵀAy + yᵀBx + E V_{t+1}(R(z − y), Cx + η)` with `R = diag(ρ)` the
/// price growth factors gives a linear `y` and a quadratic value via the
/// Schur complement of the `y` block.
pub fn execution_optimal(model: &ExecutionModel) -> Result<ExecutionOracle, BaselineError> {
    let (n, m, horizon) = (model.stocks(), model.factors(), model.def.horizon);
    let b = Blocks { n, m };
    let k = b.state();
    let a_sym = (&model.a + model.a.transpose()) * 0.5;
    if a_sym.clone().cholesky().is_none() {
        return Err(BaselineError::Invalid("execution: impact matrix must be positive definite".into()));
    }

    let mut last = DMatrix::zeros(k, k);
    last.view_mut((b.z(), b.z()), (n, n)).copy_from(&a_sym);
    last.view_mut((b.z(), b.x()), (n, m)).copy_from(&(&model.b * 0.5));
    last.view_mut((b.x(), b.z()), (m, n)).copy_from(&(model.b.transpose() * 0.5));
    for i in 0..n {
        last[(b.z() + i, b.one())] = 0.5;
        last[(b.one(), b.z() + i)] = 0.5;
    }

    let mut value = vec![last];
    let mut gains = Vec::with_capacity(horizon.saturating_sub(1));
    for t in (0..horizon.saturating_sub(1)).rev() {
        let next = value.last().expect("non-empty");
        let w = stage_form(model, &a_sym, next);
        let wyy = w.view((b.y(), b.y()), (n, n)).into_owned();
        let wyr = w.view((b.y(), 0), (n, k)).into_owned();
        let chol = wyy.cholesky().ok_or(BaselineError::NotConvex { t })?;
        let gain = -chol.solve(&wyr);
        let wrr = w.view((0, 0), (k, k)).into_owned();
        let schur = &wrr + wyr.transpose() * &gain;
        value.push((&schur + schur.transpose()) * 0.5);
        gains.push(gain);
    }
    value.reverse();
    gains.reverse();

    let mut oracle = ExecutionOracle {
        quadratic: QuadraticValue { value, gains },
        cost: 0.0,
        no_impact_cost: model.no_impact_cost(),
        residual: 0.0,
        stocks: n,
        factors: m,
        horizon,
    };
    oracle.cost = oracle.value_at(0, &initial_state(model));
    oracle.residual = check_residuals(model, &oracle)?;
    Ok(oracle)
}

fn initial_state(model: &ExecutionModel) -> Vec<f64> {
    let mut s = model.def.initial_price.clone();
    s.extend(&model.def.initial_factors);
    s.extend(&model.def.target);
    s
}

/// Quadratic form of the period cost plus expected continuation over
/// `(z, x, 1, y)`.
fn stage_form(model: &ExecutionModel, a_sym: &DMatrix<f64>, next: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (model.stocks(), model.factors());
    let b = Blocks { n, m };
    let dim = b.y() + n;
    let mzz = next.view((b.z(), b.z()), (n, n));
    let mzx = next.view((b.z(), b.x()), (n, m));
    let mz1 = next.view((b.z(), b.one()), (n, 1));
    let mxx = next.view((b.x(), b.x()), (m, m));
    let mx1 = next.view((b.x(), b.one()), (m, 1));
    let m11 = next[(b.one(), b.one())];

    let h = mzz.component_mul(&model.growth_second_moment());
    let d = DMatrix::from_diagonal(&model.growth_mean());
    let c = &model.c;
    let e = &d * mzx * c;
    let f = &d * mz1;

    let mut w = DMatrix::zeros(dim, dim);
    let mut add = |r: usize, cc: usize, block: &DMatrix<f64>, sign: f64| {
        let mut v = w.view_mut((r, cc), block.shape());
        v += block * sign;
    };
    // 1ᵀy + yᵀAy + yᵀBx
    add(b.y(), b.one(), &DMatrix::from_element(n, 1, 0.5), 1.0);
    add(b.one(), b.y(), &DMatrix::from_element(1, n, 0.5), 1.0);
    add(b.y(), b.y(), a_sym, 1.0);
    add(b.y(), b.x(), &(&model.b * 0.5), 1.0);
    add(b.x(), b.y(), &(model.b.transpose() * 0.5), 1.0);
    // (z − y)ᵀH(z − y)
    add(b.z(), b.z(), &h, 1.0);
    add(b.y(), b.y(), &h, 1.0);
    add(b.z(), b.y(), &h, -1.0);
    add(b.y(), b.z(), &h.transpose(), -1.0);
    // 2(z − y)ᵀ D Mzx C x
    add(b.z(), b.x(), &e, 1.0);
    add(b.x(), b.z(), &e.transpose(), 1.0);
    add(b.y(), b.x(), &e, -1.0);
    add(b.x(), b.y(), &e.transpose(), -1.0);
    // 2(z − y)ᵀ D Mz1
    add(b.z(), b.one(), &f, 1.0);
    add(b.one(), b.z(), &f.transpose(), 1.0);
    add(b.y(), b.one(), &f, -1.0);
    add(b.one(), b.y(), &f.transpose(), -1.0);
    // E over the factor update
    let cmx = c.transpose() * mxx * c;
    add(b.x(), b.x(), &cmx, 1.0);
    let cm1 = c.transpose() * mx1;
    add(b.x(), b.one(), &cm1, 1.0);
    add(b.one(), b.x(), &cm1.transpose(), 1.0);
    let constant = m11 + (mxx * &model.factor_noise_cov).trace();
    w[(b.one(), b.one())] += constant;
    w
}

/// Compares `vᵀM_t v` with the period cost plus expected continuation
/// evaluated term by term at the optimal trade, and checks stationarity.
fn check_residuals(model: &ExecutionModel, oracle: &ExecutionOracle) -> Result<f64, BaselineError> {
    let (n, m) = (model.stocks(), model.factors());
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let second = model.growth_second_moment();
    let mean = model.growth_mean();
    let a_sym = (&model.a + model.a.transpose()) * 0.5;
    let scale = model.state_scale();
    let mut worst = 0.0f64;
    for t in 0..oracle.horizon.saturating_sub(1) {
        let next = &oracle.quadratic.value[t + 1];
        for _ in 0..16 {
            let z = DVector::from_fn(n, |i, _| model.def.target[i] * model.def.initial_price[i] * rng.random::<f64>());
            let x = DVector::from_fn(m, |i, _| scale[n + i] * (rng.random::<f64>() * 2.0 - 1.0));
            let mut v = DVector::zeros(n + m + 1);
            v.rows_mut(0, n).copy_from(&z);
            v.rows_mut(n, m).copy_from(&x);
            v[n + m] = 1.0;
            let y = &oracle.quadratic.gains[t] * &v;
            let u = &z - &y;

            let mzz = next.view((0, 0), (n, n)).into_owned();
            let mzx = next.view((0, n), (n, m)).into_owned();
            let mz1 = next.view((0, n + m), (n, 1)).into_owned();
            let mxx = next.view((n, n), (m, m)).into_owned();
            let mx1 = next.view((n, n + m), (m, 1)).into_owned();
            let cx = &model.c * &x;
            let du = u.component_mul(&mean);
            let period = y.sum() + (y.transpose() * &a_sym * &y)[0] + (y.transpose() * &model.b * &x)[0];
            let continuation = (u.transpose() * mzz.component_mul(&second) * &u)[0]
                + 2.0 * (du.transpose() * &mzx * &cx)[0]
                + 2.0 * (du.transpose() * &mz1)[0]
                + (cx.transpose() * &mxx * &cx)[0]
                + (mxx * &model.factor_noise_cov).trace()
                + 2.0 * (cx.transpose() * &mx1)[0]
                + next[(n + m, n + m)];
            let direct = period + continuation;
            let ansatz = (v.transpose() * &oracle.quadratic.value[t] * &v)[0];
            let residual = (direct - ansatz).abs() / direct.abs().max(z.sum().abs()).max(1.0);

            let grad = DVector::from_element(n, 1.0) + 2.0 * &a_sym * &y + &model.b * &x
                - 2.0 * mzz.component_mul(&second) * &u
                - 2.0 * DMatrix::from_diagonal(&mean) * (&mzx * &cx + &mz1);
            let grad_scale = 1.0 + (2.0 * &a_sym * &y).amax() + (2.0 * mzz.component_mul(&second) * &u).amax();
            let stationarity = grad.amax() / grad_scale;
            worst = worst.max(residual).max(stationarity);
            if residual > RESIDUAL_TOLERANCE || stationarity > RESIDUAL_TOLERANCE {
                return Err(BaselineError::Residual { t, residual: residual.max(stationarity) });
            }
        }
    }
    Ok(worst)
}

impl ExecutionOracle {
    fn stacked(&self, state: &[f64]) -> (DVector<f64>, Vec<f64>) {
        let (n, m) = (self.stocks, self.factors);
        let price = &state[..n];
        let mut v = DVector::zeros(n + m + 1);
        for i in 0..n {
            v[i] = price[i] * state[n + m + i];
        }
        for j in 0..m {
            v[n + j] = state[n + j];
        }
        v[n + m] = 1.0;
        (v, price.to_vec())
    }

    /// `V_t` at a state `(p̃, x, w)`.
    pub fn value_at(&self, t: usize, state: &[f64]) -> f64 {
        let (v, _) = self.stacked(state);
        (v.transpose() * &self.quadratic.value[t] * &v)[0]
    }

    /// Optimal shares to buy at `t`; the remainder at `T − 1`.
    pub fn control(&self, t: usize, state: &[f64]) -> Vec<f64> {
        let (n, m) = (self.stocks, self.factors);
        if t + 1 >= self.horizon {
            return state[n + m..n + m + n].to_vec();
        }
        let (v, price) = self.stacked(state);
        let y = &self.quadratic.gains[t] * v;
        y.iter().zip(&price).map(|(y, p)| y / p).collect()
    }

    pub fn actor(&self) -> FnActor<impl Fn(usize, &Tensor) -> Tensor + '_> {
        FnActor(move |t: usize, states: &Tensor| {
            let data = (0..states.rows()).flat_map(|i| self.control(t, states.row(i))).collect();
            Tensor::new(vec![states.rows(), self.stocks], data).expect("positive extents")
        })
    }
}

/// `‖a − a*‖ / ‖a*‖` over every sample and every timestep where the actor
/// chose the trade, with `a*` the oracle trade at the visited state.
pub fn relative_control_error(oracle: &ExecutionOracle, rollout: &RolloutResult) -> f64 {
    let (mut diff, mut norm) = (0.0, 0.0);
    for (t, controls) in rollout.controls.iter().enumerate() {
        if rollout.forced[t] {
            continue;
        }
        let states = &rollout.states[t];
        for i in 0..states.rows() {
            let best = oracle.control(t, states.row(i));
            for (a, b) in controls.row(i).iter().zip(&best) {
                diff += (a - b).powi(2);
                norm += b * b;
            }
        }
    }
    if norm > 0.0 {
        (diff / norm).sqrt()
    } else {
        diff.sqrt()
    }
}
