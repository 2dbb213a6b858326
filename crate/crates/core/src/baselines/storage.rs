//! Backward dynamic programming for the single-device storage model on a
//! grid over `(r, w, p, d)`.
//!
//! For fixed `(a_wr, a_rd, a_rm)` the best wind-to-demand flow is
//! `a_wd = min(w − a_wr, d − a_rd)` and the market covers the rest, so the
//! search runs over the three storage flows only. Each flow takes mesh
//! points `k·γ/(resolution − 1)` inside its bound, plus the bound itself.
//!
//! Binary layout of a table file (little-endian, `u32` integers, `f64`
//! reals), version 1:
//!
//! ```text
//! magic        8 bytes "DCTLVTAB"
//! version      u32 1
//! horizon      u32
//! resolution   u32
//! capacity, charge_cap, discharge_cap, initial r, w, p, d   f64 × 7
//! r grid       u32 len, f64 × len
//! wind, price, demand chains: u32 k, levels f64 × k, transition f64 × k²
//! values       f64 × (horizon + 1) · states, timestep-major
//! actions      u8 × 3 · horizon · states, (wr, rd, rm) mesh indices
//! ```
//!
//! States are ordered `((r · W + w) · P + p) · D + d`.

use std::io::{Read, Write};

use super::BaselineError;
use crate::control::{evaluate, Actor, ActorOutput, ControlError, EvalReport};
use crate::diffgraph::{NodeId, Tape, Tensor};
use crate::envs::energy::{MD, RD, RM, WD, WR};
use crate::envs::{EnergySingleDefinition, EnergySingleModel, MarkovChain};
use crate::nets::Mode;

const MAGIC: &[u8; 8] = b"DCTLVTAB";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpOptions {
    /// Points of the storage grid on `[0, capacity]`.
    pub storage_points: usize,
    /// Mesh points per storage flow over `[0, γ]`.
    pub resolution: usize,
}

impl Default for DpOptions {
    fn default() -> Self {
        DpOptions { storage_points: 51, resolution: 11 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    pub def: EnergySingleDefinition,
    pub resolution: usize,
    pub storage: Vec<f64>,
    /// `V_0 … V_T`; `V_T = 0`.
    pub values: Vec<Vec<f64>>,
    /// Greedy mesh indices `(wr, rd, rm)` per timestep and state.
    pub actions: Vec<Vec<[u8; 3]>>,
}

/// State grid and action mesh shared by construction, lookup and replay.
struct Grid<'a> {
    def: &'a EnergySingleDefinition,
    storage: &'a [f64],
    resolution: usize,
}

fn mesh(step: f64, bound: f64) -> impl Iterator<Item = f64> {
    let bound = bound.max(0.0);
    let mut k = 0usize;
    let mut done = false;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        let v = k as f64 * step;
        if step > 0.0 && v < bound - 1e-12 {
            k += 1;
            Some(v)
        } else {
            done = true;
            Some(bound)
        }
    })
}

impl Grid<'_> {
    fn sizes(&self) -> [usize; 4] {
        [self.storage.len(), self.def.wind.len(), self.def.price.len(), self.def.demand.len()]
    }

    fn states(&self) -> usize {
        self.sizes().iter().product()
    }

    fn index(&self, ri: usize, wi: usize, pi: usize, di: usize) -> usize {
        let [_, w, p, d] = self.sizes();
        ((ri * w + wi) * p + pi) * d + di
    }

    fn unindex(&self, mut s: usize) -> [usize; 4] {
        let [_, w, p, d] = self.sizes();
        let di = s % d;
        s /= d;
        let pi = s % p;
        s /= p;
        let wi = s % w;
        [s / w, wi, pi, di]
    }

    fn state(&self, s: usize) -> [f64; 4] {
        let [ri, wi, pi, di] = self.unindex(s);
        [self.storage[ri], self.def.wind.levels[wi], self.def.price.levels[pi], self.def.demand.levels[di]]
    }

    fn steps(&self) -> (f64, f64) {
        let k = (self.resolution - 1) as f64;
        (self.def.charge_cap / k, self.def.discharge_cap / k)
    }

    fn nearest_storage(&self, r: f64) -> usize {
        let h = self.def.capacity / (self.storage.len() - 1) as f64;
        if h > 0.0 {
            ((r / h).round().max(0.0) as usize).min(self.storage.len() - 1)
        } else {
            0
        }
    }

    /// Every mesh action at state `x`, with its indices, full control and
    /// next storage index.
    fn for_each_action(&self, x: &[f64; 4], mut f: impl FnMut([u8; 3], [f64; 5], usize)) {
        let [r, w, _, d] = *x;
        let def = self.def;
        let (hc, hd) = self.steps();
        let discharge = r.min(def.discharge_cap);
        for (i, wr) in mesh(hc, (def.capacity - r).min(def.charge_cap).min(w)).enumerate() {
            for (j, rd) in mesh(hd, discharge.min(d)).enumerate() {
                for (k, rm) in mesh(hd, discharge - rd).enumerate() {
                    let wd = (w - wr).min(d - rd).max(0.0);
                    let md = (d - wd - rd).max(0.0);
                    let mut a = [0.0; 5];
                    a[WD] = wd;
                    a[MD] = md;
                    a[RD] = rd;
                    a[WR] = wr;
                    a[RM] = rm;
                    let next = self.nearest_storage(r + wr - rd - rm);
                    f([i as u8, j as u8, k as u8], a, next);
                }
            }
        }
    }

    fn action(&self, x: &[f64; 4], idx: [u8; 3]) -> Option<[f64; 5]> {
        let mut found = None;
        self.for_each_action(x, |i, a, _| {
            if i == idx {
                found = Some(a);
            }
        });
        found
    }

    /// `E[V(r, w', p', d') | w, p, d]` for every state, contracting one chain
    /// at a time.
    fn expectation(&self, v: &[f64]) -> Vec<f64> {
        let [nr, nw, np, nd] = self.sizes();
        let def = self.def;
        let mut out = v.to_vec();
        let mut tmp = vec![0.0; v.len()];
        for (axis, chain) in [(1usize, &def.wind), (2, &def.price), (3, &def.demand)] {
            for s in 0..out.len() {
                let idx = self.unindex(s);
                let mut acc = 0.0;
                for (j, p) in chain.transition[idx[axis]].iter().enumerate() {
                    if *p != 0.0 {
                        let mut jdx = idx;
                        jdx[axis] = j;
                        acc += p * out[self.index(jdx[0], jdx[1], jdx[2], jdx[3])];
                    }
                }
                tmp[s] = acc;
            }
            std::mem::swap(&mut out, &mut tmp);
        }
        debug_assert_eq!(out.len(), nr * nw * np * nd);
        out
    }
}

fn validate(def: &EnergySingleDefinition, options: &DpOptions) -> Result<(), BaselineError> {
    if options.storage_points < 2 {
        return Err(BaselineError::Invalid("dp: storage grid needs at least 2 points".into()));
    }
    if !(2..=256).contains(&options.resolution) {
        return Err(BaselineError::Invalid("dp: resolution must lie in [2, 256]".into()));
    }
    if def.capacity <= 0.0 {
        return Err(BaselineError::Invalid("dp: capacity must be positive".into()));
    }
    Ok(())
}

/// `V_t(s) = max_a [p(d + a_rm − a_md) + E V_{t+1}(s')]` backward from
/// `V_T = 0`, next storage snapped to the nearest grid point. Ties keep the
/// first action in mesh order.
pub fn energy_dp_lookup(model: &EnergySingleModel, options: &DpOptions) -> Result<ValueTable, BaselineError> {
    let def = &model.def;
    validate(def, options)?;
    let h = def.capacity / (options.storage_points - 1) as f64;
    let storage: Vec<f64> = (0..options.storage_points).map(|i| i as f64 * h).collect();
    let grid = Grid { def, storage: &storage, resolution: options.resolution };
    let states = grid.states();
    let horizon = def.horizon;

    let mut values = vec![vec![0.0; states]; horizon + 1];
    let mut actions = vec![vec![[0u8; 3]; states]; horizon];
    for t in (0..horizon).rev() {
        let ev = grid.expectation(&values[t + 1]);
        for s in 0..states {
            let [_, wi, pi, di] = grid.unindex(s);
            let x = grid.state(s);
            let mut best = f64::NEG_INFINITY;
            let mut arg = None;
            grid.for_each_action(&x, |idx, a, next| {
                let q = x[2] * (x[3] + a[RM] - a[MD]) + ev[grid.index(next, wi, pi, di)];
                if q > best {
                    best = q;
                    arg = Some(idx);
                }
            });
            let arg = arg.ok_or_else(|| BaselineError::Invalid(format!("dp: no feasible action at t = {t}")))?;
            if !best.is_finite() {
                return Err(BaselineError::Invalid(format!("dp: non-finite value at t = {t}")));
            }
            values[t][s] = best;
            actions[t][s] = arg;
        }
    }
    Ok(ValueTable { def: def.clone(), resolution: options.resolution, storage, values, actions })
}

impl ValueTable {
    fn grid(&self) -> Grid<'_> {
        Grid { def: &self.def, storage: &self.storage, resolution: self.resolution }
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn states(&self) -> usize {
        self.grid().states()
    }

    /// Table value at the model's initial state.
    pub fn root_value(&self) -> f64 {
        let s = self.locate(&[self.def.initial_storage, self.def.initial_wind, self.def.initial_price, self.def.initial_demand]);
        self.values[0][s.expect("initial state lies on the grid")]
    }

    pub fn value(&self, t: usize, ri: usize, wi: usize, pi: usize, di: usize) -> f64 {
        self.values[t][self.grid().index(ri, wi, pi, di)]
    }

    /// Grid index of a state: storage snapped to the nearest point, chain
    /// values matched exactly.
    pub fn locate(&self, state: &[f64]) -> Result<usize, BaselineError> {
        let grid = self.grid();
        let h = self.def.capacity / (self.storage.len() - 1) as f64;
        let r = state[0];
        if !(r >= -0.5 * h && r <= self.def.capacity + 0.5 * h) {
            return Err(BaselineError::OffGrid(format!("storage {r}")));
        }
        let chain = |c: &MarkovChain, v: f64, name: &str| {
            c.index_of(v).ok_or_else(|| BaselineError::OffGrid(format!("{name} {v}")))
        };
        let wi = chain(&self.def.wind, state[1], "wind")?;
        let pi = chain(&self.def.price, state[2], "price")?;
        let di = chain(&self.def.demand, state[3], "demand")?;
        Ok(grid.index(grid.nearest_storage(r), wi, pi, di))
    }

    /// Stored greedy control at `t` for `state`.
    pub fn control(&self, t: usize, state: &[f64]) -> Result<[f64; 5], BaselineError> {
        let grid = self.grid();
        let s = self.locate(state)?;
        let x = grid.state(s);
        grid.action(&x, self.actions[t][s])
            .ok_or_else(|| BaselineError::Table(format!("stored action {:?} not in mesh", self.actions[t][s])))
    }

    /// Mesh actions available at grid state `s`.
    pub fn candidates(&self, s: usize) -> Vec<[u8; 3]> {
        let grid = self.grid();
        let mut out = Vec::new();
        grid.for_each_action(&grid.state(s), |idx, _, _| out.push(idx));
        out
    }

    /// Grid values `(r, w, p, d)` of state `s`.
    pub fn state(&self, s: usize) -> [f64; 4] {
        self.grid().state(s)
    }

    /// Exact expected reward of an arbitrary table policy on the discretized
    /// model, from the initial state.
    pub fn policy_value(&self, actions: &[Vec<[u8; 3]>]) -> Result<f64, BaselineError> {
        let grid = self.grid();
        let states = grid.states();
        let mut v = vec![0.0; states];
        for t in (0..self.horizon()).rev() {
            let ev = grid.expectation(&v);
            let mut next = vec![0.0; states];
            for s in 0..states {
                let [_, wi, pi, di] = grid.unindex(s);
                let x = grid.state(s);
                let mut found = None;
                grid.for_each_action(&x, |idx, a, r_next| {
                    if idx == actions[t][s] {
                        found = Some(x[2] * (x[3] + a[RM] - a[MD]) + ev[grid.index(r_next, wi, pi, di)]);
                    }
                });
                next[s] = found.ok_or_else(|| BaselineError::Table(format!("action {:?} not in mesh", actions[t][s])))?;
            }
            v = next;
        }
        let d = &self.def;
        Ok(v[self.locate(&[d.initial_storage, d.initial_wind, d.initial_price, d.initial_demand])?])
    }

    /// Rejects a table built for different model parameters.
    pub fn check_against(&self, model: &EnergySingleModel) -> Result<(), BaselineError> {
        let (a, b) = (&self.def, &model.def);
        let same = a.horizon == b.horizon
            && a.capacity == b.capacity
            && a.charge_cap == b.charge_cap
            && a.discharge_cap == b.discharge_cap
            && a.wind == b.wind
            && a.price == b.price
            && a.demand == b.demand
            && a.initial_storage == b.initial_storage
            && a.initial_wind == b.initial_wind
            && a.initial_price == b.initial_price
            && a.initial_demand == b.initial_demand;
        if same {
            Ok(())
        } else {
            Err(BaselineError::Table("table was built for a different storage model".into()))
        }
    }

    pub fn actor(&self) -> TableActor<'_> {
        TableActor { table: self }
    }

    pub fn write(&self, mut w: impl Write) -> Result<(), BaselineError> {
        let w = &mut w;
        let d = &self.def;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        put_u32(w, self.horizon())?;
        put_u32(w, self.resolution)?;
        let scalars = [
            d.capacity,
            d.charge_cap,
            d.discharge_cap,
            d.initial_storage,
            d.initial_wind,
            d.initial_price,
            d.initial_demand,
        ];
        put_f64s(w, &scalars)?;
        put_u32(w, self.storage.len())?;
        put_f64s(w, &self.storage)?;
        for chain in [&d.wind, &d.price, &d.demand] {
            put_u32(w, chain.len())?;
            put_f64s(w, &chain.levels)?;
            for row in &chain.transition {
                put_f64s(w, row)?;
            }
        }
        for v in &self.values {
            put_f64s(w, v)?;
        }
        for a in &self.actions {
            for idx in a {
                w.write_all(idx)?;
            }
        }
        Ok(())
    }

    pub fn read(r: impl Read) -> Result<ValueTable, BaselineError> {
        let mut r = Reader { inner: r };
        if &r.bytes::<8>()? != MAGIC {
            return Err(BaselineError::Table("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(BaselineError::Table(format!("unsupported version {version}")));
        }
        let horizon = r.u32()?;
        let resolution = r.u32()?;
        let s = r.f64s(7)?;
        let n = r.dim()?;
        let storage = r.f64s(n)?;
        let mut chains = Vec::new();
        for _ in 0..3 {
            let k = r.dim()?;
            let levels = r.f64s(k)?;
            let transition = (0..k).map(|_| r.f64s(k)).collect::<Result<Vec<_>, _>>()?;
            chains.push(MarkovChain::new(levels, transition).map_err(|e| BaselineError::Table(e.to_string()))?);
        }
        let demand = chains.pop().expect("three chains");
        let price = chains.pop().expect("three chains");
        let wind = chains.pop().expect("three chains");
        let mut def = EnergySingleDefinition::default_with_horizon(horizon);
        def.capacity = s[0];
        def.charge_cap = s[1];
        def.discharge_cap = s[2];
        def.initial_storage = s[3];
        def.initial_wind = s[4];
        def.initial_price = s[5];
        def.initial_demand = s[6];
        def.wind = wind;
        def.price = price;
        def.demand = demand;
        let states = n * def.wind.len() * def.price.len() * def.demand.len();
        let values = (0..=horizon).map(|_| r.f64s(states)).collect::<Result<Vec<_>, _>>()?;
        let mut actions = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            actions.push((0..states).map(|_| r.bytes::<3>()).collect::<Result<Vec<_>, _>>()?);
        }
        let mut rest = Vec::new();
        r.inner.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(BaselineError::Table(format!("{} trailing bytes", rest.len())));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(BaselineError::Table("non-finite value".into()));
        }
        Ok(ValueTable { def, resolution, storage, values, actions })
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("length exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], BaselineError> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| BaselineError::Table(format!("truncated file ({e})")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize, BaselineError> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn dim(&mut self) -> Result<usize, BaselineError> {
        let d = self.u32()?;
        if d == 0 || d > 1 << 16 {
            return Err(BaselineError::Table(format!("implausible dimension {d}")));
        }
        Ok(d)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, BaselineError> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
}

/// Replays the stored greedy controls.
pub struct TableActor<'a> {
    table: &'a ValueTable,
}

impl Actor for TableActor<'_> {
    fn act(&self, t: usize, tape: &mut Tape, state: NodeId, _mode: Mode) -> Result<ActorOutput, ControlError> {
        let states = tape.value(state);
        let mut data = Vec::with_capacity(states.rows() * 5);
        for i in 0..states.rows() {
            let a = self.table.control(t, states.row(i)).map_err(|e| ControlError::Config(e.to_string()))?;
            data.extend(a);
        }
        let a = Tensor::new(vec![states.rows(), 5], data).expect("positive extents");
        Ok(ActorOutput { control: tape.constant(a), params: Vec::new(), moments: Vec::new() })
    }
}

/// Monte-Carlo reward of the stored greedy policy on the test stream of
/// `seed`.
pub fn table_policy_evaluate(
    table: &ValueTable,
    model: &EnergySingleModel,
    samples: usize,
    seed: u64,
) -> Result<EvalReport, BaselineError> {
    table.check_against(model)?;
    Ok(evaluate(model, &table.actor(), samples, seed)?)
}
