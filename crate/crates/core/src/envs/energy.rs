//! Energy storage arbitrage with Markov wind, price and demand.
//!
//! Single device: state `(r, w, p, d)`, control
//! `(a_wd, a_md, a_rd, a_wr, a_rm)` (wind→demand, market→demand,
//! storage→demand, wind→storage, storage→market), reward
//! `p(d + a_rm − a_md)`, storage update `r' = r + φᵀa` with
//! `φ = (0, 0, −1, 1, −1)`.
//!
//! Several devices: state `(r_1 … r_n, w, p)`, per-device control
//! `(a_wr, a_rm, a_mr)`, reward `Σ p(η a_rm − a_mr) − β r`, storage update
//! `r' = r + η(a_wr + a_mr) − a_rm`; no demand.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, MarkovChain};
use crate::control::{Constraint, ConstraintKind, ControlProblem, ProjectionError, Sense};
use crate::diffgraph::{GraphError, NodeId, Tape, Tensor};
use crate::nets::OutputHead;

pub const SINGLE_FLOW: [f64; 5] = [0.0, 0.0, -1.0, 1.0, -1.0];
/// Control component indices of the single-device model.
pub const WD: usize = 0;
pub const MD: usize = 1;
pub const RD: usize = 2;
pub const WR: usize = 3;
pub const RM: usize = 4;

/// Tolerance for storage levels leaving `[0, r_max]`.
pub const STORAGE_TOLERANCE: f64 = 1e-9;

pub fn default_price_chain() -> MarkovChain {
    MarkovChain::tridiagonal(10.0, 70.0, 11, 0.6).expect("valid chain")
}

pub fn default_wind_chain() -> MarkovChain {
    MarkovChain::tridiagonal(0.0, 16.0, 9, 0.6).expect("valid chain")
}

pub fn default_demand_chain() -> MarkovChain {
    MarkovChain::tridiagonal(0.0, 12.0, 7, 0.6).expect("valid chain")
}

fn uniforms(rng: &mut dyn RngCore, batch: usize, horizon: usize, k: usize) -> Tensor {
    let data = (0..batch * horizon * k).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![batch, horizon, k], data).expect("positive extents")
}

fn level_index(chain: &MarkovChain, value: f64) -> usize {
    chain.index_of(value).unwrap_or_else(|| chain.nearest(value))
}

fn row_constant(tape: &mut Tape, batch: usize, row: &[f64]) -> NodeId {
    let data = (0..batch).flat_map(|_| row.iter().copied()).collect();
    tape.constant(Tensor::new(vec![batch, row.len()], data).expect("positive extents"))
}

/// `min{x, c}` as `c + min{0, x − c}` for a per-column constant `c`.
fn min_const(tape: &mut Tape, x: NodeId, caps: &[f64]) -> Result<NodeId, GraphError> {
    let batch = tape.shape(x)[0];
    let c = row_constant(tape, batch, caps);
    let d = tape.sub(x, c)?;
    let m = tape.min_zero(d)?;
    tape.add(c, m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySingleDefinition {
    pub horizon: usize,
    pub capacity: f64,
    pub charge_cap: f64,
    pub discharge_cap: f64,
    pub wind: MarkovChain,
    pub price: MarkovChain,
    pub demand: MarkovChain,
    pub initial_storage: f64,
    pub initial_wind: f64,
    pub initial_price: f64,
    pub initial_demand: f64,
    #[serde(default = "default_single_penalty")]
    pub equality_penalty: f64,
    #[serde(default = "default_single_penalty")]
    pub inequality_penalty: f64,
}

fn default_single_penalty() -> f64 {
    500.0
}

impl EnergySingleDefinition {
    /// Capacity 20, transfer caps 4, default chains, starting half full at
    /// mid-range wind, price and demand.
    pub fn default_with_horizon(horizon: usize) -> Self {
        let (wind, price, demand) = (default_wind_chain(), default_price_chain(), default_demand_chain());
        EnergySingleDefinition {
            horizon,
            capacity: 20.0,
            charge_cap: 4.0,
            discharge_cap: 4.0,
            initial_storage: 10.0,
            initial_wind: wind.levels[4],
            initial_price: price.levels[5],
            initial_demand: demand.levels[3],
            wind,
            price,
            demand,
            equality_penalty: default_single_penalty(),
            inequality_penalty: default_single_penalty(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnergySingleModel {
    pub def: EnergySingleDefinition,
}

impl EnergySingleModel {
    pub fn new(def: EnergySingleDefinition) -> Result<Self, EnvError> {
        def.wind.validate()?;
        def.price.validate()?;
        def.demand.validate()?;
        if def.horizon == 0 {
            return Err(EnvError::Invalid("energy: horizon must be positive".into()));
        }
        for (name, v) in [("capacity", def.capacity), ("charge_cap", def.charge_cap), ("discharge_cap", def.discharge_cap)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(EnvError::Invalid(format!("energy: {name} must be nonnegative")));
            }
        }
        if !(0.0..=def.capacity).contains(&def.initial_storage) {
            return Err(EnvError::Invalid("energy: initial_storage outside [0, capacity]".into()));
        }
        if def.wind.levels[0] < 0.0 || def.demand.levels[0] < 0.0 {
            return Err(EnvError::Invalid("energy: wind and demand levels must be nonnegative".into()));
        }
        for (name, chain, v) in [
            ("initial_wind", &def.wind, def.initial_wind),
            ("initial_price", &def.price, def.initial_price),
            ("initial_demand", &def.demand, def.initial_demand),
        ] {
            if chain.index_of(v).is_none() {
                return Err(EnvError::Invalid(format!("energy: {name} = {v} is not a chain level")));
            }
        }
        if !(def.equality_penalty >= 0.0 && def.inequality_penalty >= 0.0) {
            return Err(EnvError::Invalid("energy: penalty coefficients must be nonnegative".into()));
        }
        Ok(EnergySingleModel { def })
    }

    /// Admissibility of a control at `state = (r, w, p, d)`, within `tol`.
    pub fn is_feasible(&self, state: &[f64], a: &[f64], tol: f64) -> bool {
        let (r, w, d) = (state[0], state[1], state[3]);
        let def = &self.def;
        a.iter().all(|v| *v >= -tol)
            && (a[WD] + a[RD] + a[MD] - d).abs() <= tol
            && a[WR] + a[WD] <= w + tol
            && a[RD] + a[RM] <= r.min(def.discharge_cap) + tol
            && a[WR] <= (def.capacity - r).min(def.charge_cap) + tol
    }

    /// Chain indices `(w, p, d)` of a state.
    pub fn exogenous_indices(&self, state: &[f64]) -> (usize, usize, usize) {
        (
            level_index(&self.def.wind, state[1]),
            level_index(&self.def.price, state[2]),
            level_index(&self.def.demand, state[3]),
        )
    }
}

/// Single-device reward `p(d + a_rm − a_md)`.
pub fn energy_reward_single(state: &[f64], a: &[f64]) -> f64 {
    state[2] * (state[3] + a[RM] - a[MD])
}

/// Storage level after `a`; rejects levels outside `[0, capacity]`.
pub fn energy_step_single(model: &EnergySingleModel, state: &[f64], a: &[f64], u: &[f64]) -> Result<Vec<f64>, EnvError> {
    let r: f64 = state[0] + SINGLE_FLOW.iter().zip(a).map(|(f, x)| f * x).sum::<f64>();
    check_storage(r, model.def.capacity)?;
    let (wi, pi, di) = model.exogenous_indices(state);
    let def = &model.def;
    Ok(vec![
        r,
        def.wind.levels[def.wind.step(wi, u[0])],
        def.price.levels[def.price.step(pi, u[1])],
        def.demand.levels[def.demand.step(di, u[2])],
    ])
}

fn check_storage(r: f64, capacity: f64) -> Result<(), EnvError> {
    if r < -STORAGE_TOLERANCE || r > capacity + STORAGE_TOLERANCE {
        return Err(EnvError::StorageBounds { level: r, capacity });
    }
    Ok(())
}

/// Three-stage projection onto the single-device admissible set.
pub fn project_single(def: &EnergySingleDefinition, state: &[f64], raw: &[f64]) -> Vec<f64> {
    let (r, w, d) = (state[0].clamp(0.0, def.capacity), state[1].max(0.0), state[3].max(0.0));
    let mut a: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    a[WR] = a[WR].min((def.capacity - r).min(def.charge_cap));

    let scale_pair = |a: &mut Vec<f64>, i: usize, j: usize, cap: f64| {
        let sum = a[i] + a[j];
        if sum > cap {
            let k = if sum > 0.0 { cap / sum } else { 0.0 };
            a[i] *= k;
            a[j] *= k;
        }
    };
    scale_pair(&mut a, WR, WD, w);
    scale_pair(&mut a, RD, RM, r.min(def.discharge_cap));
    scale_pair(&mut a, WD, RD, d);
    a[MD] = (d - a[WD] - a[RD]).max(0.0);
    a
}

impl ControlProblem for EnergySingleModel {
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        5
    }
    fn horizon(&self) -> usize {
        self.def.horizon
    }
    fn noise_dim(&self) -> usize {
        3
    }
    fn initial_state(&self) -> Vec<f64> {
        let d = &self.def;
        vec![d.initial_storage, d.initial_wind, d.initial_price, d.initial_demand]
    }
    fn sample_noise(&self, rng: &mut dyn RngCore, batch: usize) -> Tensor {
        uniforms(rng, batch, self.horizon(), 3)
    }
    fn step(&self, _t: usize, tape: &mut Tape, s: NodeId, a: NodeId, noise: &Tensor) -> Result<NodeId, GraphError> {
        let batch = noise.rows();
        let mut exo = Vec::with_capacity(batch * 3);
        for i in 0..batch {
            let row = tape.value(s).row(i);
            let (wi, pi, di) = self.exogenous_indices(row);
            let u = noise.row(i);
            exo.push(self.def.wind.levels[self.def.wind.step(wi, u[0])]);
            exo.push(self.def.price.levels[self.def.price.step(pi, u[1])]);
            exo.push(self.def.demand.levels[self.def.demand.step(di, u[2])]);
        }
        let r = tape.slice_cols(s, 0, 1)?;
        let phi = tape.constant(Tensor::new(vec![5, 1], SINGLE_FLOW.to_vec()).expect("positive extents"));
        let flow = tape.matmul(a, phi)?;
        let r_next = tape.add(r, flow)?;
        let exo = tape.constant(Tensor::new(vec![batch, 3], exo).expect("positive extents"));
        tape.concat(&[r_next, exo])
    }
    fn stage_cost(&self, _t: usize, tape: &mut Tape, s: NodeId, a: NodeId) -> Result<NodeId, GraphError> {
        let p = tape.slice_cols(s, 2, 1)?;
        let d = tape.slice_cols(s, 3, 1)?;
        let rm = tape.slice_cols(a, RM, 1)?;
        let md = tape.slice_cols(a, MD, 1)?;
        let net = tape.add(d, rm)?;
        let net = tape.sub(net, md)?;
        let reward = tape.mul(p, net)?;
        tape.scale(reward, -1.0)
    }
    fn terminal_cost(&self, tape: &mut Tape, s: NodeId) -> Result<NodeId, GraphError> {
        let rows = tape.shape(s)[0];
        Ok(tape.constant(Tensor::zeros(&[rows, 1])))
    }
    fn constraints(&self, _t: usize, tape: &mut Tape, s: NodeId, a: NodeId) -> Result<Vec<Constraint>, GraphError> {
        let def = &self.def;
        let r = tape.slice_cols(s, 0, 1)?;
        let w = tape.slice_cols(s, 1, 1)?;
        let d = tape.slice_cols(s, 3, 1)?;
        let col = |tape: &mut Tape, k: usize| tape.slice_cols(a, k, 1);
        let (wd, md, rd, wr, rm) = (col(tape, WD)?, col(tape, MD)?, col(tape, RD)?, col(tape, WR)?, col(tape, RM)?);

        let served = tape.add(wd, rd)?;
        let served = tape.add(served, md)?;
        let balance = tape.sub(served, d)?;

        let wind_used = tape.add(wr, wd)?;
        let wind = tape.sub(w, wind_used)?;

        let discharge = min_const(tape, r, &[def.discharge_cap])?;
        let drawn = tape.add(rd, rm)?;
        let discharge = tape.sub(discharge, drawn)?;

        let neg_r = tape.scale(r, -1.0)?;
        let headroom = tape.add_scalar(neg_r, def.capacity)?;
        let headroom = min_const(tape, headroom, &[def.charge_cap])?;
        let charge = tape.sub(headroom, wr)?;

        let upper = tape.concat(&[wind, discharge, charge])?;
        let (le, li) = (def.equality_penalty, def.inequality_penalty);
        Ok(vec![
            Constraint { name: "demand_balance", kind: ConstraintKind::Equality, values: balance, coefficient: le },
            Constraint { name: "capacity", kind: ConstraintKind::Inequality, values: upper, coefficient: li },
            Constraint { name: "nonnegative", kind: ConstraintKind::Inequality, values: a, coefficient: li },
        ])
    }
    fn project(&self, _t: usize, state: &[f64], control: &[f64]) -> Result<Vec<f64>, ProjectionError> {
        Ok(project_single(&self.def, state, control))
    }
    fn output_head(&self) -> OutputHead {
        OutputHead::Nonnegative
    }
    fn sense(&self) -> Sense {
        Sense::Maximize
    }
    fn state_scale(&self) -> Vec<f64> {
        let d = &self.def;
        [d.capacity, d.wind.max_level(), d.price.max_level(), d.demand.max_level()]
            .iter()
            .map(|v| if *v > 0.0 { *v } else { 1.0 })
            .collect()
    }
    fn control_scale(&self) -> Vec<f64> {
        let d = &self.def;
        let dm = d.demand.max_level().max(1e-12);
        let cap = |v: f64| if v > 0.0 { v } else { 1.0 };
        vec![cap(dm), cap(dm), cap(d.discharge_cap), cap(d.charge_cap), cap(d.discharge_cap)]
    }
}

/// One storage device of the multi-device model. Charge and discharge share
/// the transfer cap and the efficiency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Device {
    pub capacity: f64,
    pub transfer_cap: f64,
    pub efficiency: f64,
    pub holding_cost: f64,
    pub initial_storage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyMultiDefinition {
    pub horizon: usize,
    pub devices: Vec<Device>,
    pub wind: MarkovChain,
    pub price: MarkovChain,
    pub initial_wind: f64,
    pub initial_price: f64,
    #[serde(default = "default_multi_penalty")]
    pub inequality_penalty: f64,
}

fn default_multi_penalty() -> f64 {
    30.0
}

/// Random devices whose transfer caps, efficiencies and holding costs
/// decrease with capacity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedDevices {
    pub devices: usize,
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
}

impl GeneratedDevices {
    /// Capacities evenly spaced on `[20, 100]`; transfer caps on `[2, 10]`,
    /// efficiencies on `[0.8, 0.99]` and holding costs on `[0.001, 0.02]`
    /// drawn uniformly and sorted in decreasing order; storage starts half
    /// full.
    pub fn generate(&self) -> Result<EnergyMultiDefinition, EnvError> {
        let n = self.devices;
        if n == 0 {
            return Err(EnvError::Invalid("energy: at least one device".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut draw = |lo: f64, hi: f64| {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            v
        };
        let caps = draw(2.0, 10.0);
        let effs = draw(0.8, 0.99);
        let betas = draw(0.001, 0.02);
        let devices = (0..n)
            .map(|i| {
                let capacity = if n == 1 { 20.0 } else { 20.0 + 80.0 * i as f64 / (n - 1) as f64 };
                Device {
                    capacity,
                    transfer_cap: caps[i],
                    efficiency: effs[i],
                    holding_cost: betas[i],
                    initial_storage: 0.5 * capacity,
                }
            })
            .collect();
        let (wind, price) = (default_wind_chain(), default_price_chain());
        Ok(EnergyMultiDefinition {
            horizon: self.horizon,
            devices,
            initial_wind: wind.levels[4],
            initial_price: price.levels[5],
            wind,
            price,
            inequality_penalty: default_multi_penalty(),
        })
    }
}

/// Sorted by capacity, are transfer caps, efficiencies and holding costs all
/// non-increasing?
pub fn is_monotone(devices: &[Device]) -> bool {
    let mut d: Vec<&Device> = devices.iter().collect();
    d.sort_by(|a, b| a.capacity.total_cmp(&b.capacity));
    d.windows(2).all(|w| {
        w[1].transfer_cap <= w[0].transfer_cap
            && w[1].efficiency <= w[0].efficiency
            && w[1].holding_cost <= w[0].holding_cost
    })
}

/// Per-device component offsets of the multi-device control.
pub const M_WR: usize = 0;
pub const M_RM: usize = 1;
pub const M_MR: usize = 2;

#[derive(Clone, Debug)]
pub struct EnergyMultiModel {
    pub def: EnergyMultiDefinition,
    flow: Tensor,
    trade: Tensor,
    charge_sum: Tensor,
    wind_sum: Tensor,
    holding: Tensor,
}

impl EnergyMultiModel {
    pub fn new(def: EnergyMultiDefinition) -> Result<Self, EnvError> {
        def.wind.validate()?;
        def.price.validate()?;
        let n = def.devices.len();
        if n == 0 || def.horizon == 0 {
            return Err(EnvError::Invalid("energy: need devices and a positive horizon".into()));
        }
        for (i, dev) in def.devices.iter().enumerate() {
            let ok = dev.capacity > 0.0
                && dev.transfer_cap >= 0.0
                && dev.efficiency > 0.0
                && dev.efficiency <= 1.0
                && dev.holding_cost >= 0.0
                && (0.0..=dev.capacity).contains(&dev.initial_storage);
            if !ok {
                return Err(EnvError::Invalid(format!("energy: device {i} has invalid parameters")));
            }
        }
        if def.wind.levels[0] < 0.0 {
            return Err(EnvError::Invalid("energy: wind levels must be nonnegative".into()));
        }
        if def.wind.index_of(def.initial_wind).is_none() || def.price.index_of(def.initial_price).is_none() {
            return Err(EnvError::Invalid("energy: initial wind and price must be chain levels".into()));
        }
        if !(def.inequality_penalty >= 0.0) {
            return Err(EnvError::Invalid("energy: penalty coefficient must be nonnegative".into()));
        }
        let mut flow = vec![0.0; 3 * n * n];
        let mut trade = vec![0.0; 3 * n];
        let mut charge_sum = vec![0.0; 3 * n * n];
        let mut wind_sum = vec![0.0; 3 * n];
        for (i, dev) in def.devices.iter().enumerate() {
            flow[(3 * i + M_WR) * n + i] = dev.efficiency;
            flow[(3 * i + M_RM) * n + i] = -1.0;
            flow[(3 * i + M_MR) * n + i] = dev.efficiency;
            trade[3 * i + M_RM] = dev.efficiency;
            trade[3 * i + M_MR] = -1.0;
            charge_sum[(3 * i + M_WR) * n + i] = 1.0;
            charge_sum[(3 * i + M_MR) * n + i] = 1.0;
            wind_sum[3 * i + M_WR] = 1.0;
        }
        let holding = def.devices.iter().map(|d| d.holding_cost).collect();
        Ok(EnergyMultiModel {
            flow: Tensor::new(vec![3 * n, n], flow).expect("positive extents"),
            trade: Tensor::new(vec![3 * n, 1], trade).expect("positive extents"),
            charge_sum: Tensor::new(vec![3 * n, n], charge_sum).expect("positive extents"),
            wind_sum: Tensor::new(vec![3 * n, 1], wind_sum).expect("positive extents"),
            holding: Tensor::new(vec![n, 1], holding).expect("positive extents"),
            def,
        })
    }

    pub fn devices(&self) -> usize {
        self.def.devices.len()
    }

    /// Charging headroom `min{(r_max − r)/η, γ}`.
    pub fn headroom(&self, i: usize, r: f64) -> f64 {
        let d = &self.def.devices[i];
        ((d.capacity - r) / d.efficiency).min(d.transfer_cap)
    }

    pub fn is_feasible(&self, state: &[f64], a: &[f64], tol: f64) -> bool {
        let n = self.devices();
        let w = state[n];
        let mut wind = 0.0;
        for (i, dev) in self.def.devices.iter().enumerate() {
            let (wr, rm, mr) = (a[3 * i + M_WR], a[3 * i + M_RM], a[3 * i + M_MR]);
            if wr < -tol || rm < -tol || mr < -tol {
                return false;
            }
            if wr + mr > self.headroom(i, state[i]) + tol || rm > state[i].min(dev.transfer_cap) + tol {
                return false;
            }
            wind += wr;
        }
        wind <= w + tol
    }
}

/// Multi-device reward `Σ_i p(η_i a_rm − a_mr) − β_i r_i`.
pub fn energy_reward_multi(def: &EnergyMultiDefinition, state: &[f64], a: &[f64]) -> f64 {
    let n = def.devices.len();
    let p = state[n + 1];
    def.devices
        .iter()
        .enumerate()
        .map(|(i, d)| p * (d.efficiency * a[3 * i + M_RM] - a[3 * i + M_MR]) - d.holding_cost * state[i])
        .sum()
}

/// Storage levels after `a`; rejects levels outside `[0, capacity]`.
pub fn energy_step_multi(model: &EnergyMultiModel, state: &[f64], a: &[f64], u: &[f64]) -> Result<Vec<f64>, EnvError> {
    let n = model.devices();
    let mut next = Vec::with_capacity(n + 2);
    for (i, d) in model.def.devices.iter().enumerate() {
        let r = state[i] + d.efficiency * (a[3 * i + M_WR] + a[3 * i + M_MR]) - a[3 * i + M_RM];
        check_storage(r, d.capacity)?;
        next.push(r);
    }
    let def = &model.def;
    next.push(def.wind.levels[def.wind.step(level_index(&def.wind, state[n]), u[0])]);
    next.push(def.price.levels[def.price.step(level_index(&def.price, state[n + 1]), u[1])]);
    Ok(next)
}

/// Clip to nonnegative, cap discharge by `min{r, γ}`, scale wind charging to
/// the available wind, cap wind charging by the headroom and fill the rest
/// of the headroom with market charging.
pub fn project_multi(model: &EnergyMultiModel, state: &[f64], raw: &[f64]) -> Vec<f64> {
    let n = model.devices();
    let w = state[n].max(0.0);
    let mut a: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    for (i, d) in model.def.devices.iter().enumerate() {
        let r = state[i].clamp(0.0, d.capacity);
        a[3 * i + M_RM] = a[3 * i + M_RM].min(r.min(d.transfer_cap));
    }
    let wind: f64 = (0..n).map(|i| a[3 * i + M_WR]).sum();
    if wind > w {
        let k = if wind > 0.0 { w / wind } else { 0.0 };
        (0..n).for_each(|i| a[3 * i + M_WR] *= k);
    }
    for (i, d) in model.def.devices.iter().enumerate() {
        let h = model.headroom(i, state[i].clamp(0.0, d.capacity)).max(0.0);
        a[3 * i + M_WR] = a[3 * i + M_WR].min(h);
        a[3 * i + M_MR] = a[3 * i + M_MR].min(h - a[3 * i + M_WR]).max(0.0);
    }
    a
}

impl ControlProblem for EnergyMultiModel {
    fn state_dim(&self) -> usize {
        self.devices() + 2
    }
    fn control_dim(&self) -> usize {
        3 * self.devices()
    }
    fn horizon(&self) -> usize {
        self.def.horizon
    }
    fn noise_dim(&self) -> usize {
        2
    }
    fn initial_state(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.def.devices.iter().map(|d| d.initial_storage).collect();
        s.push(self.def.initial_wind);
        s.push(self.def.initial_price);
        s
    }
    fn sample_noise(&self, rng: &mut dyn RngCore, batch: usize) -> Tensor {
        uniforms(rng, batch, self.horizon(), 2)
    }
    fn step(&self, _t: usize, tape: &mut Tape, s: NodeId, a: NodeId, noise: &Tensor) -> Result<NodeId, GraphError> {
        let n = self.devices();
        let batch = noise.rows();
        let def = &self.def;
        let mut exo = Vec::with_capacity(batch * 2);
        for i in 0..batch {
            let row = tape.value(s).row(i);
            let u = noise.row(i);
            exo.push(def.wind.levels[def.wind.step(level_index(&def.wind, row[n]), u[0])]);
            exo.push(def.price.levels[def.price.step(level_index(&def.price, row[n + 1]), u[1])]);
        }
        let r = tape.slice_cols(s, 0, n)?;
        let flow = tape.constant(self.flow.clone());
        let delta = tape.matmul(a, flow)?;
        let r_next = tape.add(r, delta)?;
        let exo = tape.constant(Tensor::new(vec![batch, 2], exo).expect("positive extents"));
        tape.concat(&[r_next, exo])
    }
    fn stage_cost(&self, _t: usize, tape: &mut Tape, s: NodeId, a: NodeId) -> Result<NodeId, GraphError> {
        let n = self.devices();
        let r = tape.slice_cols(s, 0, n)?;
        let p = tape.slice_cols(s, n + 1, 1)?;
        let trade = tape.constant(self.trade.clone());
        let traded = tape.matmul(a, trade)?;
        let revenue = tape.mul(p, traded)?;
        let holding = tape.constant(self.holding.clone());
        let held = tape.matmul(r, holding)?;
        tape.sub(held, revenue)
    }
    fn terminal_cost(&self, tape: &mut Tape, s: NodeId) -> Result<NodeId, GraphError> {
        let rows = tape.shape(s)[0];
        Ok(tape.constant(Tensor::zeros(&[rows, 1])))
    }
    fn constraints(&self, _t: usize, tape: &mut Tape, s: NodeId, a: NodeId) -> Result<Vec<Constraint>, GraphError> {
        let n = self.devices();
        let devs = &self.def.devices;
        let batch = tape.shape(s)[0];
        let r = tape.slice_cols(s, 0, n)?;
        let w = tape.slice_cols(s, n, 1)?;

        let inv_eta: Vec<f64> = devs.iter().map(|d| -1.0 / d.efficiency).collect();
        let scaled = tape.scale_cols(r, &inv_eta)?;
        let full: Vec<f64> = devs.iter().map(|d| d.capacity / d.efficiency).collect();
        let full = row_constant(tape, batch, &full);
        let room = tape.add(scaled, full)?;
        let gammas: Vec<f64> = devs.iter().map(|d| d.transfer_cap).collect();
        let room = min_const(tape, room, &gammas)?;
        let cs = tape.constant(self.charge_sum.clone());
        let charged = tape.matmul(a, cs)?;
        let charge = tape.sub(room, charged)?;

        let avail = min_const(tape, r, &gammas)?;
        let rm_cols: Vec<usize> = (0..n).map(|i| 3 * i + M_RM).collect();
        let rm = tape.select_cols(a, &rm_cols)?;
        let discharge = tape.sub(avail, rm)?;

        let ws = tape.constant(self.wind_sum.clone());
        let wind_used = tape.matmul(a, ws)?;
        let wind = tape.sub(w, wind_used)?;

        let upper = tape.concat(&[charge, discharge, wind])?;
        let sigma = self.def.inequality_penalty;
        Ok(vec![
            Constraint { name: "capacity", kind: ConstraintKind::Inequality, values: upper, coefficient: sigma },
            Constraint { name: "nonnegative", kind: ConstraintKind::Inequality, values: a, coefficient: sigma },
        ])
    }
    fn project(&self, _t: usize, state: &[f64], control: &[f64]) -> Result<Vec<f64>, ProjectionError> {
        Ok(project_multi(self, state, control))
    }
    fn output_head(&self) -> OutputHead {
        OutputHead::Nonnegative
    }
    fn sense(&self) -> Sense {
        Sense::Maximize
    }
    fn state_scale(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.def.devices.iter().map(|d| d.capacity).collect();
        s.push(self.def.wind.max_level().max(1e-12));
        s.push(self.def.price.max_level().max(1e-12));
        s
    }
    fn control_scale(&self) -> Vec<f64> {
        self.def
            .devices
            .iter()
            .flat_map(|d| {
                let g = if d.transfer_cap > 0.0 { d.transfer_cap } else { 1.0 };
                [g; 3]
            })
            .collect()
    }
}
