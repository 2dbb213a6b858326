//! Optimal execution of a basket purchase under linear percentage price
//! impact. The executed price is `p = p̃ + P̃(A P̃ a + B x)` with
//! `P̃ = diag(p̃)`, the no-impact price follows a geometric Brownian motion,
//! market factors follow `x' = C x + η`. State `(p̃, x, w)` with `w` the
//! shares still to buy; the last trade buys whatever remains.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_psd, check_square, mat_tensor, matrix, psd_factor, spectral_radius, EnvError};
use crate::control::ControlProblem;
use crate::diffgraph::{GraphError, NodeId, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionDefinition {
    pub horizon: usize,
    /// `A`, `n × n`, symmetric positive semidefinite (definite for the
    /// oracle).
    pub impact: Vec<Vec<f64>>,
    /// `B`, `n × m`.
    pub factor_impact: Vec<Vec<f64>>,
    /// `C`, `m × m`, spectral radius below 1.
    pub factor_transition: Vec<Vec<f64>>,
    /// Covariance of `η`, `m × m`.
    pub factor_noise_cov: Vec<Vec<f64>>,
    /// Per-period log drift `μ` of the no-impact price.
    pub drift: Vec<f64>,
    /// Per-period covariance of the log price increments, `n × n`.
    pub price_cov: Vec<Vec<f64>>,
    /// Shares to buy, `ā`.
    pub target: Vec<f64>,
    pub initial_price: Vec<f64>,
    pub initial_factors: Vec<f64>,
}

/// Parameters of the canonical random instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalExecution {
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_stocks")]
    pub stocks: usize,
    #[serde(default = "default_factors")]
    pub factors: usize,
    #[serde(default = "default_impact_scale")]
    pub impact_scale: f64,
    #[serde(default = "default_factor_impact_std")]
    pub factor_impact_std: f64,
    #[serde(default = "default_factor_noise_std")]
    pub factor_noise_std: f64,
    #[serde(default = "default_factor_radius")]
    pub factor_radius: f64,
    #[serde(default = "default_volatility")]
    pub volatility: f64,
    #[serde(default = "default_correlation")]
    pub correlation: f64,
    #[serde(default = "default_target")]
    pub target: f64,
    #[serde(default = "default_price")]
    pub price: f64,
}

fn default_stocks() -> usize {
    10
}
fn default_factors() -> usize {
    3
}
fn default_impact_scale() -> f64 {
    1e-8
}
fn default_factor_impact_std() -> f64 {
    2e-6
}
fn default_factor_noise_std() -> f64 {
    1e4
}
fn default_factor_radius() -> f64 {
    0.5
}
fn default_volatility() -> f64 {
    0.02
}
fn default_correlation() -> f64 {
    0.3
}
fn default_target() -> f64 {
    1e5
}
fn default_price() -> f64 {
    50.0
}

impl CanonicalExecution {
    pub fn new(horizon: usize, seed: u64) -> Self {
        CanonicalExecution {
            horizon,
            seed,
            stocks: default_stocks(),
            factors: default_factors(),
            impact_scale: default_impact_scale(),
            factor_impact_std: default_factor_impact_std(),
            factor_noise_std: default_factor_noise_std(),
            factor_radius: default_factor_radius(),
            volatility: default_volatility(),
            correlation: default_correlation(),
            target: default_target(),
            price: default_price(),
        }
    }

    /// `A = s(I + U/2)` with `U = MMᵀ/n`, `B_ij ~ N(0, σ_B²)`, `C` symmetric
    /// random rescaled to the requested spectral radius, equicorrelated price
    /// increments with zero drift, `x_0 = 0`.
    pub fn generate(&self) -> Result<ExecutionDefinition, EnvError> {
        let (n, m) = (self.stocks, self.factors);
        if n == 0 || m == 0 || self.horizon == 0 {
            return Err(EnvError::Invalid("execution: stocks, factors and horizon must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mm = normal(n, n);
        let u = &mm * mm.transpose() / n as f64;
        let a = (DMatrix::identity(n, n) + u * 0.5) * self.impact_scale;
        let a = (&a + a.transpose()) * 0.5;
        let b = normal(n, m) * self.factor_impact_std;
        let raw = normal(m, m);
        let c_sym = (&raw + raw.transpose()) * 0.5;
        let rho = spectral_radius(&c_sym);
        let c = if rho > 0.0 { c_sym * (self.factor_radius / rho) } else { c_sym };
        let eta = DMatrix::identity(m, m) * self.factor_noise_std.powi(2);
        let v2 = self.volatility.powi(2);
        let price_cov = DMatrix::from_fn(n, n, |i, j| if i == j { v2 } else { v2 * self.correlation });
        Ok(ExecutionDefinition {
            horizon: self.horizon,
            impact: to_rows(&a),
            factor_impact: to_rows(&b),
            factor_transition: to_rows(&c),
            factor_noise_cov: to_rows(&eta),
            drift: vec![0.0; n],
            price_cov: to_rows(&price_cov),
            target: vec![self.target; n],
            initial_price: vec![self.price; n],
            initial_factors: vec![0.0; m],
        })
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Clone, Debug)]
pub struct ExecutionModel {
    pub def: ExecutionDefinition,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub factor_noise_cov: DMatrix<f64>,
    pub price_cov: DMatrix<f64>,
    pub drift: DVector<f64>,
    price_chol: DMatrix<f64>,
    factor_chol: DMatrix<f64>,
    a_t: Tensor,
    b_t: Tensor,
    c_t: Tensor,
    state_scale: Vec<f64>,
}

impl ExecutionModel {
    pub fn new(def: ExecutionDefinition) -> Result<Self, EnvError> {
        let n = def.target.len();
        let m = def.initial_factors.len();
        if n == 0 || m == 0 || def.horizon == 0 {
            return Err(EnvError::Invalid("execution: stocks, factors and horizon must be positive".into()));
        }
        let a = matrix("impact", &def.impact)?;
        let b = matrix("factor_impact", &def.factor_impact)?;
        let c = matrix("factor_transition", &def.factor_transition)?;
        let eta = matrix("factor_noise_cov", &def.factor_noise_cov)?;
        let price_cov = matrix("price_cov", &def.price_cov)?;
        check_square("impact", &a, n)?;
        if b.shape() != (n, m) {
            return Err(EnvError::Invalid(format!("execution: factor_impact is {:?}, expected ({n}, {m})", b.shape())));
        }
        check_square("factor_transition", &c, m)?;
        check_square("factor_noise_cov", &eta, m)?;
        check_square("price_cov", &price_cov, n)?;
        if def.drift.len() != n || def.initial_price.len() != n {
            return Err(EnvError::Invalid("execution: drift and initial_price need one entry per stock".into()));
        }
        check_psd("impact", &a)?;
        let rho = spectral_radius(&c);
        if rho >= 1.0 {
            return Err(EnvError::Invalid(format!("execution: factor_transition has spectral radius {rho} ≥ 1")));
        }
        check_psd("factor_noise_cov", &eta)?;
        check_psd("price_cov", &price_cov)?;
        if def.initial_price.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(EnvError::Invalid("execution: initial prices must be positive".into()));
        }
        if def.target.iter().chain(&def.initial_factors).chain(&def.drift).any(|v| !v.is_finite()) {
            return Err(EnvError::Invalid("execution: non-finite parameter".into()));
        }

        // Stationary factor covariance sets the input scale of x.
        let mut stat = DMatrix::zeros(m, m);
        for _ in 0..500 {
            stat = &c * &stat * c.transpose() + &eta;
        }
        let mut state_scale = def.initial_price.clone();
        state_scale.extend((0..m).map(|i| {
            let sd = stat[(i, i)].sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        }));
        state_scale.extend(def.target.iter().map(|v| if v.abs() > 0.0 { v.abs() } else { 1.0 }));

        Ok(ExecutionModel {
            price_chol: psd_factor(&price_cov),
            factor_chol: psd_factor(&eta),
            a_t: mat_tensor(&a.transpose()),
            b_t: mat_tensor(&b.transpose()),
            c_t: mat_tensor(&c.transpose()),
            drift: DVector::from_column_slice(&def.drift),
            a,
            b,
            c,
            factor_noise_cov: eta,
            price_cov,
            state_scale,
            def,
        })
    }

    pub fn stocks(&self) -> usize {
        self.def.target.len()
    }

    pub fn factors(&self) -> usize {
        self.def.initial_factors.len()
    }

    /// `p_0ᵀ ā`, the cost of buying everything at the initial no-impact price.
    pub fn no_impact_cost(&self) -> f64 {
        self.def.initial_price.iter().zip(&self.def.target).map(|(p, a)| p * a).sum()
    }

    /// Multiplicative price factor and factor innovation for one noise row
    /// `(ε, ζ)`.
    pub fn shocks(&self, noise: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.stocks();
        let eps = DVector::from_column_slice(&noise[..n]);
        let zeta = DVector::from_column_slice(&noise[n..]);
        let log = &self.price_chol * eps;
        let growth = (0..n)
            .map(|i| (self.drift[i] - 0.5 * self.price_cov[(i, i)] + log[i]).exp())
            .collect();
        let innovation = (&self.factor_chol * zeta).iter().copied().collect();
        (growth, innovation)
    }

    /// `exp(μ_i + μ_j + Σ_ij)`, the second moment of the price growth factors.
    pub fn growth_second_moment(&self) -> DMatrix<f64> {
        let n = self.stocks();
        DMatrix::from_fn(n, n, |i, j| (self.drift[i] + self.drift[j] + self.price_cov[(i, j)]).exp())
    }

    /// `E[growth] = exp(μ)`.
    pub fn growth_mean(&self) -> DVector<f64> {
        self.drift.map(f64::exp)
    }
}

/// `p = p̃ + P̃(A P̃ a + B x)`.
pub fn execution_price(
    impact: &DMatrix<f64>,
    factor_impact: &DMatrix<f64>,
    price: &[f64],
    factors: &[f64],
    a: &[f64],
) -> Vec<f64> {
    let pt = DVector::from_column_slice(price);
    let y = pt.component_mul(&DVector::from_column_slice(a));
    let impact = impact * y + factor_impact * DVector::from_column_slice(factors);
    (pt.clone() + pt.component_mul(&impact)).iter().copied().collect()
}

/// One transition on plain values: returns the next state and `pᵀa`. At the
/// last step the trade is replaced by the remaining shares.
pub fn execution_step(model: &ExecutionModel, t: usize, state: &[f64], a: &[f64], noise: &[f64]) -> (Vec<f64>, f64) {
    let (n, m) = (model.stocks(), model.factors());
    let (price, rest) = state.split_at(n);
    let (factors, remaining) = rest.split_at(m);
    let a: Vec<f64> = if t + 1 == model.def.horizon { remaining.to_vec() } else { a.to_vec() };
    let p = execution_price(&model.a, &model.b, price, factors, &a);
    let cost = p.iter().zip(&a).map(|(p, a)| p * a).sum();
    let (growth, innovation) = model.shocks(noise);
    let mut next: Vec<f64> = price.iter().zip(&growth).map(|(p, g)| p * g).collect();
    let x = &model.c * DVector::from_column_slice(factors);
    next.extend(x.iter().zip(&innovation).map(|(x, e)| x + e));
    next.extend(remaining.iter().zip(&a).map(|(w, a)| w - a));
    (next, cost)
}

impl ControlProblem for ExecutionModel {
    fn state_dim(&self) -> usize {
        2 * self.stocks() + self.factors()
    }
    fn control_dim(&self) -> usize {
        self.stocks()
    }
    fn horizon(&self) -> usize {
        self.def.horizon
    }
    fn noise_dim(&self) -> usize {
        self.stocks() + self.factors()
    }
    fn initial_state(&self) -> Vec<f64> {
        let mut s = self.def.initial_price.clone();
        s.extend(&self.def.initial_factors);
        s.extend(&self.def.target);
        s
    }
    fn sample_noise(&self, rng: &mut dyn RngCore, batch: usize) -> Tensor {
        let (t, d) = (self.horizon(), self.noise_dim());
        let data = (0..batch * t * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(vec![batch, t, d], data).expect("positive extents")
    }
    fn step(&self, _t: usize, tape: &mut Tape, s: NodeId, a: NodeId, noise: &Tensor) -> Result<NodeId, GraphError> {
        let (n, m) = (self.stocks(), self.factors());
        let batch = noise.rows();
        let mut growth = Vec::with_capacity(batch * n);
        let mut innovation = Vec::with_capacity(batch * m);
        for i in 0..batch {
            let (g, e) = self.shocks(noise.row(i));
            growth.extend(g);
            innovation.extend(e);
        }
        let price = tape.slice_cols(s, 0, n)?;
        let factors = tape.slice_cols(s, n, m)?;
        let remaining = tape.slice_cols(s, n + m, n)?;
        let growth = tape.constant(Tensor::new(vec![batch, n], growth).expect("positive extents"));
        let next_price = tape.mul(price, growth)?;
        let ct = tape.constant(self.c_t.clone());
        let cx = tape.matmul(factors, ct)?;
        let innovation = tape.constant(Tensor::new(vec![batch, m], innovation).expect("positive extents"));
        let next_factors = tape.add(cx, innovation)?;
        let next_remaining = tape.sub(remaining, a)?;
        tape.concat(&[next_price, next_factors, next_remaining])
    }
    fn stage_cost(&self, _t: usize, tape: &mut Tape, s: NodeId, a: NodeId) -> Result<NodeId, GraphError> {
        let (n, m) = (self.stocks(), self.factors());
        let price = tape.slice_cols(s, 0, n)?;
        let factors = tape.slice_cols(s, n, m)?;
        // Dollar trade y = P̃a; cost 1ᵀy + yᵀA y + yᵀB x.
        let y = tape.mul(price, a)?;
        let at = tape.constant(self.a_t.clone());
        let bt = tape.constant(self.b_t.clone());
        let ya = tape.matmul(y, at)?;
        let xb = tape.matmul(factors, bt)?;
        let inner = tape.add(ya, xb)?;
        let quad = tape.mul(y, inner)?;
        let quad = tape.sum_cols(quad)?;
        let lin = tape.sum_cols(y)?;
        tape.add(lin, quad)
    }
    fn terminal_cost(&self, tape: &mut Tape, s: NodeId) -> Result<NodeId, GraphError> {
        let rows = tape.shape(s)[0];
        Ok(tape.constant(Tensor::zeros(&[rows, 1])))
    }
    fn forced_control(&self, t: usize, tape: &mut Tape, s: NodeId) -> Result<Option<NodeId>, GraphError> {
        if t + 1 == self.def.horizon {
            let n = self.stocks();
            return Ok(Some(tape.slice_cols(s, n + self.factors(), n)?));
        }
        Ok(None)
    }
    fn state_scale(&self) -> Vec<f64> {
        self.state_scale.clone()
    }
    fn control_scale(&self) -> Vec<f64> {
        let t = self.def.horizon as f64;
        self.def.target.iter().map(|v| if v.abs() > 0.0 { v.abs() / t } else { 1.0 }).collect()
    }
}

/// `(policy − p_0ᵀā) / (oracle − p_0ᵀā)`: costs measured above the
/// no-impact benchmark, 1 for the optimum.
pub fn execution_relative_cost(model: &ExecutionModel, policy_cost: f64, oracle_cost: f64) -> Result<f64, EnvError> {
    let base = model.no_impact_cost();
    let excess = oracle_cost - base;
    if !(excess.abs() > 1e-12 * base.abs().max(1.0)) {
        return Err(EnvError::Invalid("execution: oracle cost equals the no-impact cost".into()));
    }
    Ok((policy_cost - base) / excess)
}
