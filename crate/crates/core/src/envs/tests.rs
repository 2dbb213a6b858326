use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::energy::*;
use super::execution::{execution_price, execution_step};
use super::*;
use crate::control::{
    apply_penalties, evaluate, gradient_check, rollout_batch, stream_rng, ControlProblem, FnActor, GradCheckOptions,
    PenaltyOverride, RolloutOptions, StackedPolicy, Stream,
};
use crate::diffgraph::Tensor;

fn scalar_execution(horizon: usize, impact: f64, factor_impact: f64, vol: f64) -> ExecutionModel {
    ExecutionModel::new(ExecutionDefinition {
        horizon,
        impact: vec![vec![impact]],
        factor_impact: vec![vec![factor_impact]],
        factor_transition: vec![vec![0.5]],
        factor_noise_cov: vec![vec![1.0]],
        drift: vec![0.0],
        price_cov: vec![vec![vol * vol]],
        target: vec![100.0],
        initial_price: vec![2.0],
        initial_factors: vec![0.3],
    })
    .unwrap()
}

#[test]
fn execution_price_examples() {
    let zero = DMatrix::zeros(2, 2);
    let zb = DMatrix::zeros(2, 1);
    assert_eq!(execution_price(&zero, &zb, &[3.0, 4.0], &[5.0], &[7.0, -1.0]), vec![3.0, 4.0]);

    let a = DMatrix::from_element(1, 1, 0.01);
    let p = execution_price(&a, &DMatrix::zeros(1, 1), &[2.0], &[0.0], &[5.0]);
    assert!((p[0] - 2.2).abs() < 1e-15);

    let b = DMatrix::from_row_slice(2, 1, &[0.1, -0.2]);
    let p = execution_price(&zero, &b, &[3.0, 4.0], &[2.0], &[0.0, 0.0]);
    assert!((p[0] - (3.0 + 3.0 * 0.2)).abs() < 1e-15);
    assert!((p[1] - (4.0 - 4.0 * 0.4)).abs() < 1e-15);
}

#[test]
fn no_trade_costs_nothing_and_final_trade_is_forced() {
    let model = scalar_execution(3, 0.01, 0.1, 0.02);
    let s = model.initial_state();
    let (next, cost) = execution_step(&model, 0, &s, &[0.0], &[0.3, -0.1]);
    assert_eq!(cost, 0.0);
    assert_eq!(next[2], 100.0);

    let s = vec![2.0, 0.0, 3.0];
    let (next, cost) = execution_step(&model, 2, &s, &[55.0], &[0.0, 0.0]);
    assert_eq!(next[2], 0.0);
    let p = execution_price(&model.a, &model.b, &[2.0], &[0.0], &[3.0]);
    assert!((cost - 3.0 * p[0]).abs() < 1e-12);

    // Same on the tape, whatever the actor proposes.
    let noise = Tensor::zeros(&[2, 3, 2]);
    let g = rollout_batch(&model, &FnActor(|_t, s: &Tensor| Tensor::full(&[s.rows(), 1], 10.0)), &noise, RolloutOptions::eval_penalized()).unwrap();
    let r = g.result;
    assert!(r.forced == vec![false, false, true]);
    assert_eq!(r.controls[2].data(), &[80.0, 80.0]);
    assert_eq!(r.states[3].get(0, 2), 0.0);
}

#[test]
fn uniform_split_matches_deterministic_recursion() {
    let model = ExecutionModel::new(
        CanonicalExecution { volatility: 0.0, ..CanonicalExecution::new(4, 3) }.generate().map(|mut d| {
            d.initial_factors = vec![1e4, -5e3, 2e3];
            d
        }).unwrap(),
    )
    .unwrap();
    let n = model.stocks();
    let t = model.def.horizon;
    let noise = Tensor::zeros(&[1, t, model.noise_dim()]);
    let per: Vec<f64> = model.def.target.iter().map(|v| v / t as f64).collect();
    let per2 = per.clone();
    let actor = FnActor(move |_t, _s: &Tensor| Tensor::from_rows(&[per2.clone()]).unwrap());
    let g = rollout_batch(&model, &actor, &noise, RolloutOptions::eval_penalized()).unwrap();

    let p0 = nalgebra::DVector::from_column_slice(&model.def.initial_price);
    let y = p0.component_mul(&nalgebra::DVector::from_column_slice(&per));
    let mut x = nalgebra::DVector::from_column_slice(&model.def.initial_factors);
    let mut expected = 0.0;
    for _ in 0..t {
        expected += y.sum() + (y.transpose() * &model.a * &y)[0] + (y.transpose() * &model.b * &x)[0];
        x = &model.c * x;
    }
    assert_eq!(n, 10);
    let got = g.result.total_cost[0];
    assert!((got - expected).abs() < 1e-9 * expected, "{got} vs {expected}");
}

#[test]
fn execution_accounting_is_exact() {
    let model = ExecutionModel::new(CanonicalExecution::new(5, 1).generate().unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let policy = StackedPolicy::init(&model, &[16, 16], true, &mut rng).unwrap();
    let noise = model.sample_noise(&mut rng, 32);
    let r = rollout_batch(&model, &policy, &noise, RolloutOptions::train()).unwrap().result;
    let n = model.stocks();
    for i in 0..32 {
        for k in 0..n {
            let total: f64 = r.controls.iter().map(|a| a.get(i, k)).sum();
            assert!((total - 1e5).abs() < 1e-9 * 1e5);
            assert_eq!(r.states[5].get(i, 2 * n + 3 - n + k), 0.0);
        }
    }
}

#[test]
fn tape_and_plain_execution_steps_agree() {
    let model = ExecutionModel::new(CanonicalExecution::new(3, 2).generate().unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = model.sample_noise(&mut rng, 3);
    let actor = FnActor(|t: usize, s: &Tensor| Tensor::full(&[s.rows(), 10], 1e4 * (t + 1) as f64));
    let r = rollout_batch(&model, &actor, &noise, RolloutOptions::eval_penalized()).unwrap().result;
    for i in 0..3 {
        let mut s = model.initial_state();
        let mut total = 0.0;
        for t in 0..3 {
            let nrow = crate::control::noise_at(&noise, t);
            let (next, cost) = execution_step(&model, t, &s, r.controls[t].row(i), nrow.row(i));
            assert!((cost - r.stage_costs[t][i]).abs() < 1e-9 * cost.abs());
            for (a, b) in next.iter().zip(r.states[t + 1].row(i)) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
            total += cost;
            s = next;
        }
        assert!((total - r.total_cost[i]).abs() < 1e-9 * total);
    }
}

#[test]
fn zero_impact_cost_is_a_martingale() {
    let mut def = CanonicalExecution::new(4, 5).generate().unwrap();
    def.impact = vec![vec![0.0; 10]; 10];
    def.factor_impact = vec![vec![0.0; 3]; 10];
    let model = ExecutionModel::new(def).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let policy = StackedPolicy::init(&model, &[8], true, &mut rng).unwrap();
    let report = evaluate(&model, &policy, 100_000, 7).unwrap();
    let target = model.no_impact_cost();
    assert!(
        (report.mean - target).abs() < 3.0 * report.std_error,
        "{} vs {target} (se {})",
        report.mean,
        report.std_error
    );
}

#[test]
fn invalid_execution_definitions_are_rejected() {
    let good = CanonicalExecution::new(3, 0).generate().unwrap();
    let mut bad = good.clone();
    bad.factor_transition = vec![vec![1.2, 0.0, 0.0], vec![0.0, 0.1, 0.0], vec![0.0, 0.0, 0.1]];
    assert!(ExecutionModel::new(bad).is_err());
    let mut bad = good.clone();
    bad.initial_price[0] = 0.0;
    assert!(ExecutionModel::new(bad).is_err());
    let mut bad = good.clone();
    bad.impact[0][1] += 1.0;
    assert!(ExecutionModel::new(bad).is_err());
    let mut bad = good;
    bad.factor_impact.pop();
    assert!(ExecutionModel::new(bad).is_err());
}

#[test]
fn canonical_instance_properties() {
    let model = ExecutionModel::new(CanonicalExecution::new(5, 0).generate().unwrap()).unwrap();
    assert_eq!(model.state_dim(), 23);
    assert_eq!(model.control_dim(), 10);
    assert!((spectral_radius(&model.c) - 0.5).abs() < 1e-9);
    assert!(model.a.clone().cholesky().is_some());
    assert_eq!(model.no_impact_cost(), 10.0 * 50.0 * 1e5);
}

#[test]
fn markov_step_examples() {
    let id = MarkovChain::identity(vec![1.0, 2.0, 3.0]).unwrap();
    for u in [0.0, 0.3, 0.999] {
        assert_eq!(id.step(1, u), 1);
    }
    let two = MarkovChain::new(vec![0.0, 1.0], vec![vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
    assert_eq!(two.step(0, 0.29), 0);
    assert_eq!(two.step(0, 0.31), 1);
    let uni = MarkovChain::new(vec![0.0, 1.0, 2.0, 3.0], vec![vec![0.25; 4]; 4]).unwrap();
    assert_eq!(uni.step(2, 0.0), 0);
}

#[test]
fn chains_are_validated() {
    assert!(MarkovChain::new(vec![0.0, 1.0], vec![vec![0.5, 0.6], vec![0.5, 0.5]]).is_err());
    assert!(MarkovChain::new(vec![1.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).is_err());
    assert!(MarkovChain::new(vec![0.0, 1.0], vec![vec![1.0, 0.0]]).is_err());
    for c in [default_price_chain(), default_wind_chain(), default_demand_chain()] {
        c.validate().unwrap();
    }
    assert_eq!(default_price_chain().len(), 11);
    assert_eq!(default_wind_chain().levels, (0..9).map(|i| 2.0 * i as f64).collect::<Vec<_>>());
}

#[test]
fn chains_reach_their_stationary_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for chain in [default_price_chain(), default_wind_chain(), default_demand_chain()] {
        let pi = chain.stationary();
        let mut counts = vec![0usize; chain.len()];
        let mut i = 0;
        let steps = 1_000_000;
        for _ in 0..steps {
            i = chain.step(i, rng.random::<f64>());
            counts[i] += 1;
        }
        let tv: f64 = counts.iter().zip(&pi).map(|(c, p)| (*c as f64 / steps as f64 - p).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.01, "tv {tv}");
    }
}

#[test]
fn energy_reward_examples() {
    assert_eq!(energy_reward_single(&[0.0, 0.0, 30.0, 4.0], &[0.0, 2.0, 0.0, 0.0, 1.0]), 90.0);
    let dev = Device { capacity: 20.0, transfer_cap: 4.0, efficiency: 0.9, holding_cost: 0.1, initial_storage: 10.0 };
    let def = EnergyMultiDefinition {
        horizon: 1,
        devices: vec![dev],
        wind: default_wind_chain(),
        price: default_price_chain(),
        initial_wind: 0.0,
        initial_price: 10.0,
        inequality_penalty: 30.0,
    };
    assert!((energy_reward_multi(&def, &[10.0, 0.0, 30.0], &[0.0, 2.0, 1.0]) - 23.0).abs() < 1e-12);
    let mut zero = def.clone();
    zero.devices[0].holding_cost = 0.0;
    assert_eq!(energy_reward_multi(&zero, &[10.0, 0.0, 30.0], &[0.0; 3]), 0.0);
    assert_eq!(energy_reward_single(&[5.0, 3.0, 30.0, 0.0], &[0.0; 5]), 0.0);
}

fn one_device(eff: f64) -> EnergyMultiModel {
    EnergyMultiModel::new(EnergyMultiDefinition {
        horizon: 2,
        devices: vec![Device { capacity: 20.0, transfer_cap: 4.0, efficiency: eff, holding_cost: 0.0, initial_storage: 5.0 }],
        wind: default_wind_chain(),
        price: default_price_chain(),
        initial_wind: 8.0,
        initial_price: 40.0,
        inequality_penalty: 30.0,
    })
    .unwrap()
}

#[test]
fn energy_step_examples() {
    let single = EnergySingleModel::new(EnergySingleDefinition::default_with_horizon(3)).unwrap();
    let next = energy_step_single(&single, &[5.0, 8.0, 40.0, 6.0], &[3.0, 0.0, 1.0, 2.0, 1.0], &[0.5; 3]).unwrap();
    assert_eq!(next[0], 5.0);
    let next = energy_step_single(&single, &[5.0, 8.0, 40.0, 6.0], &[0.0; 5], &[0.5; 3]).unwrap();
    assert_eq!(next[0], 5.0);
    assert!(matches!(
        energy_step_single(&single, &[1.0, 8.0, 40.0, 6.0], &[0.0, 0.0, 2.0, 0.0, 0.0], &[0.5; 3]),
        Err(EnvError::StorageBounds { .. })
    ));

    let multi = one_device(0.8);
    let next = energy_step_multi(&multi, &[5.0, 8.0, 40.0], &[2.0, 1.0, 1.0], &[0.5; 2]).unwrap();
    assert!((next[0] - 6.4).abs() < 1e-12);
    let next = energy_step_multi(&multi, &[5.0, 8.0, 40.0], &[0.0; 3], &[0.5; 2]).unwrap();
    assert_eq!(next[0], 5.0);
}

#[test]
fn tape_step_matches_plain_step() {
    let single = EnergySingleModel::new(EnergySingleDefinition::default_with_horizon(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let policy = StackedPolicy::init(&single, &[8], true, &mut rng).unwrap();
    let noise = single.sample_noise(&mut rng, 5);
    let r = rollout_batch(&single, &policy, &noise, RolloutOptions::eval_projected()).unwrap().result;
    for i in 0..5 {
        for t in 0..4 {
            let u = crate::control::noise_at(&noise, t);
            let next = energy_step_single(&single, r.states[t].row(i), r.controls[t].row(i), u.row(i)).unwrap();
            assert_eq!(next.as_slice(), r.states[t + 1].row(i));
            let reward = energy_reward_single(r.states[t].row(i), r.controls[t].row(i));
            assert!((reward + r.stage_costs[t][i]).abs() < 1e-12);
        }
    }
}

#[test]
fn projection_examples() {
    let def = EnergySingleDefinition::default_with_horizon(3);
    let model = EnergySingleModel::new(def.clone()).unwrap();
    let s = [10.0, 8.0, 40.0, 6.0];
    let feasible = [2.0, 1.0, 3.0, 4.0, 1.0];
    assert!(model.is_feasible(&s, &feasible, 0.0));
    assert_eq!(project_single(&def, &s, &feasible), feasible.to_vec());

    // Wind pair uses 1.5 w.
    let raw = [4.0, 1.0, 1.0, 8.0, 0.0];
    let p = project_single(&def, &s, &raw);
    let k = 8.0 / 12.0;
    assert!(raw[WR] * k > def.charge_cap, "cap applies first");
    let wr = def.charge_cap;
    let k = 8.0 / (wr + 4.0);
    assert!((p[WR] - wr * k).abs() < 1e-12 && (p[WD] - 4.0 * k).abs() < 1e-12);
    assert!(model.is_feasible(&s, &p, 1e-12));

    let raw = [-1.0, 2.0, 1.0, 1.0, -3.0];
    let p = project_single(&def, &s, &raw);
    assert_eq!(p[WD], 0.0);
    assert_eq!(p[RM], 0.0);
    assert!(model.is_feasible(&s, &p, 1e-12));
}

#[test]
fn wind_scaling_without_other_caps() {
    let mut def = EnergySingleDefinition::default_with_horizon(2);
    def.charge_cap = 100.0;
    let s = [0.0, 8.0, 40.0, 12.0];
    let raw = [6.0, 0.0, 0.0, 6.0, 0.0];
    let p = project_single(&def, &s, &raw);
    assert!((p[WR] - 4.0).abs() < 1e-12 && (p[WD] - 4.0).abs() < 1e-12);
    assert!((p[MD] - 8.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn single_projection_is_feasible_and_idempotent(
        r in 0.0f64..20.0,
        wi in 0usize..9,
        di in 0usize..7,
        raw in proptest::collection::vec(-5.0f64..15.0, 5),
    ) {
        let def = EnergySingleDefinition::default_with_horizon(2);
        let model = EnergySingleModel::new(def.clone()).unwrap();
        let s = [r, def.wind.levels[wi], 40.0, def.demand.levels[di]];
        let p = project_single(&def, &s, &raw);
        prop_assert!(model.is_feasible(&s, &p, 1e-9));
        prop_assert!((p[WD] + p[RD] + p[MD] - s[3]).abs() <= 1e-12);
        let again = project_single(&def, &s, &p);
        for (a, b) in again.iter().zip(&p) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let next = energy_step_single(&model, &s, &p, &[0.5; 3]).unwrap();
        prop_assert!(next[0] >= -1e-9 && next[0] <= 20.0 + 1e-9);
        let pen = apply_penalties(&model, 0, &s, &p, &PenaltyOverride::default()).unwrap();
        prop_assert!(pen <= 1e-12);
    }

    #[test]
    fn single_penalty_vanishes_iff_feasible(
        r in 0.0f64..20.0,
        raw in proptest::collection::vec(-1.0f64..8.0, 5),
    ) {
        let def = EnergySingleDefinition::default_with_horizon(2);
        let model = EnergySingleModel::new(def.clone()).unwrap();
        let s = [r, 8.0, 40.0, 6.0];
        let pen = apply_penalties(&model, 0, &s, &raw, &PenaltyOverride::default()).unwrap();
        prop_assert_eq!(pen == 0.0, model.is_feasible(&s, &raw, 0.0));
    }

    #[test]
    fn multi_projection_is_feasible(
        seed in 0u64..50,
        n in 1usize..6,
        raw_seed in any::<u64>(),
    ) {
        let def = GeneratedDevices { devices: n, horizon: 2, seed }.generate().unwrap();
        let model = EnergyMultiModel::new(def.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(raw_seed);
        let mut s: Vec<f64> = def.devices.iter().map(|d| rng.random_range(0.0..=d.capacity)).collect();
        s.push(def.wind.levels[rng.random_range(0..9)]);
        s.push(40.0);
        let raw: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-3.0..12.0)).collect();
        let p = project_multi(&model, &s, &raw);
        prop_assert!(model.is_feasible(&s, &p, 1e-9));
        let next = energy_step_multi(&model, &s, &p, &[0.5, 0.5]).unwrap();
        for (i, d) in def.devices.iter().enumerate() {
            prop_assert!(next[i] >= -1e-9 && next[i] <= d.capacity + 1e-9);
        }
        let pen = apply_penalties(&model, 0, &s, &p, &PenaltyOverride::default()).unwrap();
        prop_assert!(pen <= 1e-12);
        let raw_pen = apply_penalties(&model, 0, &s, &raw, &PenaltyOverride::default()).unwrap();
        prop_assert_eq!(raw_pen == 0.0, model.is_feasible(&s, &raw, 0.0));
    }

    #[test]
    fn generated_devices_are_monotone(seed in any::<u64>(), n in 1usize..12) {
        let def = GeneratedDevices { devices: n, horizon: 3, seed }.generate().unwrap();
        prop_assert!(is_monotone(&def.devices));
        prop_assert!(EnergyMultiModel::new(def.clone()).is_ok());
        for d in &def.devices {
            prop_assert!((20.0..=100.0).contains(&d.capacity));
            prop_assert!((2.0..=10.0).contains(&d.transfer_cap));
            prop_assert!((0.8..=0.99).contains(&d.efficiency));
            prop_assert!((0.001..=0.02).contains(&d.holding_cost));
        }
    }
}

#[test]
fn projected_rollouts_respect_storage_bounds() {
    let single = EnergySingleModel::new(EnergySingleDefinition::default_with_horizon(10)).unwrap();
    let multi = EnergyMultiModel::new(GeneratedDevices { devices: 4, horizon: 10, seed: 2 }.generate().unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let problems: [&dyn ControlProblem; 2] = [&single, &multi];
    for p in problems {
        let policy = StackedPolicy::init(p, &[16, 16], true, &mut rng).unwrap();
        let report = evaluate(p, &policy, 2000, 1).unwrap();
        assert!(report.feasible(), "{report:?}");
        let noise = p.sample_noise(&mut stream_rng(1, Stream::Test), 200);
        let r = rollout_batch(p, &policy, &noise, RolloutOptions::eval_projected()).unwrap().result;
        let caps = p.state_scale();
        let k = p.state_dim() - if p.state_dim() == 4 { 3 } else { 2 };
        for s in &r.states {
            for i in 0..200 {
                for j in 0..k {
                    let v = s.get(i, j);
                    assert!(v >= -1e-9 && v <= caps[j] + 1e-9, "{v}");
                }
            }
        }
    }
}

#[test]
fn environment_gradients_match_finite_differences() {
    let exec = ExecutionModel::new(
        CanonicalExecution { stocks: 2, factors: 1, ..CanonicalExecution::new(3, 4) }.generate().unwrap(),
    )
    .unwrap();
    let single = EnergySingleModel::new(EnergySingleDefinition::default_with_horizon(3)).unwrap();
    let multi = EnergyMultiModel::new(GeneratedDevices { devices: 2, horizon: 3, seed: 1 }.generate().unwrap()).unwrap();
    let problems: [&dyn ControlProblem; 3] = [&exec, &single, &multi];
    for (k, p) in problems.into_iter().enumerate() {
        let report = gradient_check(p, &[4, 4], true, k as u64, &GradCheckOptions::default()).unwrap();
        assert!(report.passed, "problem {k}: {report:?}");
    }
}

#[test]
fn definitions_round_trip_through_toml() {
    let defs = vec![
        EnvDefinition::ExecutionCanonical(CanonicalExecution::new(5, 0)),
        EnvDefinition::EnergySingleDefault { horizon: 10 },
        EnvDefinition::EnergyMultiGenerated(GeneratedDevices { devices: 3, horizon: 10, seed: 4 }),
    ];
    for def in defs {
        let text = toml::to_string(&def).unwrap();
        let back: EnvDefinition = toml::from_str(&text).unwrap();
        assert_eq!(back, def);
        let explicit = def.resolve().unwrap();
        let text = toml::to_string(&explicit).unwrap();
        let back: EnvDefinition = toml::from_str(&text).unwrap();
        assert_eq!(back, explicit);
        let env = back.build().unwrap();
        assert_eq!(env.definition(), explicit);
    }
    assert!(toml::from_str::<EnvDefinition>("kind = \"energy_single_default\"\nhorizon = 3\nextra = 1").is_err());
}
