use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::nets::{LearningRateSchedule, Mode};

/// `s' = s + a + noise_scale·ξ`, `c_t = ca·|a|² + cs·|s|²`, `c_T = ct·|s|²`.
/// Optionally one constraint family `a − offset` (equality or `≥ 0`) at
/// the listed timesteps.
#[derive(Clone)]
struct Toy {
    dim: usize,
    horizon: usize,
    s0: Vec<f64>,
    noise_scale: f64,
    ca: f64,
    cs: f64,
    ct: f64,
    constraint: Option<(ConstraintKind, f64, f64)>,
    constrained_steps: Vec<usize>,
    blow_up_at: Option<usize>,
    all_forced: bool,
}

impl Toy {
    fn new(dim: usize, horizon: usize) -> Self {
        Toy {
            dim,
            horizon,
            s0: vec![1.0; dim],
            noise_scale: 0.0,
            ca: 0.0,
            cs: 0.0,
            ct: 0.0,
            constraint: None,
            constrained_steps: (0..horizon).collect(),
            blow_up_at: None,
            all_forced: false,
        }
    }
}

fn weighted_sq(tape: &mut Tape, x: NodeId, w: f64) -> Result<NodeId, GraphError> {
    let sq = tape.square(x)?;
    let s = tape.sum_cols(sq)?;
    tape.scale(s, w)
}

impl ControlProblem for Toy {
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn control_dim(&self) -> usize {
        self.dim
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn noise_dim(&self) -> usize {
        self.dim
    }
    fn initial_state(&self) -> Vec<f64> {
        self.s0.clone()
    }
    fn sample_noise(&self, rng: &mut dyn RngCore, batch: usize) -> Tensor {
        let n = batch * self.horizon * self.dim;
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(vec![batch, self.horizon, self.dim], data).unwrap()
    }
    fn step(&self, t: usize, tape: &mut Tape, s: NodeId, a: NodeId, noise: &Tensor) -> Result<NodeId, GraphError> {
        let next = tape.add(s, a)?;
        let xi = tape.constant(noise.map(|v| v * self.noise_scale));
        let next = tape.add(next, xi)?;
        if self.blow_up_at == Some(t) {
            let big = tape.scale(next, 1e300)?;
            return tape.scale(big, 1e300);
        }
        Ok(next)
    }
    fn stage_cost(&self, _t: usize, tape: &mut Tape, s: NodeId, a: NodeId) -> Result<NodeId, GraphError> {
        let ca = weighted_sq(tape, a, self.ca)?;
        let cs = weighted_sq(tape, s, self.cs)?;
        tape.add(ca, cs)
    }
    fn terminal_cost(&self, tape: &mut Tape, s: NodeId) -> Result<NodeId, GraphError> {
        weighted_sq(tape, s, self.ct)
    }
    fn constraints(&self, t: usize, tape: &mut Tape, _s: NodeId, a: NodeId) -> Result<Vec<Constraint>, GraphError> {
        match self.constraint {
            Some((kind, offset, coefficient)) if self.constrained_steps.contains(&t) => {
                let values = tape.add_scalar(a, -offset)?;
                Ok(vec![Constraint { name: "toy", kind, values, coefficient }])
            }
            _ => Ok(Vec::new()),
        }
    }
    fn forced_control(&self, _t: usize, tape: &mut Tape, s: NodeId) -> Result<Option<NodeId>, GraphError> {
        if self.all_forced {
            return Ok(Some(tape.scale(s, -0.5)?));
        }
        Ok(None)
    }
    fn project(&self, _t: usize, _s: &[f64], a: &[f64]) -> Result<Vec<f64>, ProjectionError> {
        match self.constraint {
            Some((ConstraintKind::Inequality, offset, _)) => Ok(a.iter().map(|v| v.max(offset)).collect()),
            Some((ConstraintKind::Equality, offset, _)) => Ok(vec![offset; a.len()]),
            None => Ok(a.to_vec()),
        }
    }
}

fn constant_actor(value: f64) -> FnActor<impl Fn(usize, &Tensor) -> Tensor> {
    FnActor(move |_t: usize, s: &Tensor| Tensor::full(s.shape(), value))
}

fn zero_noise(p: &Toy, batch: usize) -> Tensor {
    Tensor::zeros(&[batch, p.horizon, p.dim])
}

fn small_config(seed: u64, iterations: u64) -> TrainingConfig {
    TrainingConfig {
        batch_size: 16,
        iterations,
        learning_rate: LearningRateSchedule::constant(1e-2),
        validation_batch_size: 64,
        validation_every: 5,
        seed,
        hidden: vec![6, 6],
        use_batchnorm: true,
        penalties: PenaltyOverride::default(),
    }
}

#[test]
fn penalty_examples() {
    let none = Toy::new(1, 1);
    assert_eq!(apply_penalties(&none, 0, &[0.0], &[3.0], &PenaltyOverride::default()).unwrap(), 0.0);

    let mut eq = Toy::new(1, 1);
    eq.constraint = Some((ConstraintKind::Equality, 0.0, 500.0));
    assert_eq!(apply_penalties(&eq, 0, &[0.0], &[0.5], &PenaltyOverride::default()).unwrap(), 125.0);

    let mut ineq = Toy::new(1, 1);
    ineq.constraint = Some((ConstraintKind::Inequality, 0.0, 30.0));
    assert_eq!(apply_penalties(&ineq, 0, &[0.0], &[-0.5], &PenaltyOverride::default()).unwrap(), 7.5);
    assert_eq!(apply_penalties(&ineq, 0, &[0.0], &[1.0], &PenaltyOverride::default()).unwrap(), 0.0);

    let over = PenaltyOverride { equality: None, inequality: Some(2.0) };
    assert_eq!(apply_penalties(&ineq, 0, &[0.0], &[-0.5], &over).unwrap(), 0.5);
    let neg = PenaltyOverride { equality: None, inequality: Some(-1.0) };
    assert!(matches!(
        apply_penalties(&ineq, 0, &[0.0], &[-0.5], &neg),
        Err(ControlError::NegativePenalty { .. })
    ));
}

proptest! {
    #[test]
    fn penalty_vanishes_exactly_on_the_feasible_set(
        a in proptest::collection::vec(-2.0f64..2.0, 3),
        equality in any::<bool>(),
        exact in any::<bool>(),
    ) {
        let kind = if equality { ConstraintKind::Equality } else { ConstraintKind::Inequality };
        let mut p = Toy::new(3, 1);
        p.constraint = Some((kind, 0.0, 7.0));
        let a: Vec<f64> = if exact && equality { vec![0.0; 3] } else { a };
        let pen = apply_penalties(&p, 0, &[0.0; 3], &a, &PenaltyOverride::default()).unwrap();
        let feasible = match kind {
            ConstraintKind::Equality => a.iter().all(|v| v.abs() <= 1e-12),
            ConstraintKind::Inequality => a.iter().all(|v| *v >= -1e-12),
        };
        prop_assert_eq!(pen.abs() <= 1e-12, feasible);
    }
}

#[test]
fn zero_costs_give_zero_total() {
    let p = Toy::new(2, 3);
    let g = rollout_batch(&p, &constant_actor(0.7), &zero_noise(&p, 4), RolloutOptions::eval_penalized()).unwrap();
    assert!(g.result.total_cost.iter().all(|c| *c == 0.0));
}

#[test]
fn one_step_hand_example() {
    let mut p = Toy::new(1, 1);
    p.ca = 1.0;
    p.ct = 1.0;
    let g = rollout_batch(&p, &constant_actor(-0.5), &zero_noise(&p, 2), RolloutOptions::eval_penalized()).unwrap();
    assert_eq!(g.result.total_cost, vec![0.5, 0.5]);
    assert_eq!(g.tape.value(g.loss).data(), &[0.5]);
}

#[test]
fn violated_inequality_at_first_step_only() {
    let mut p = Toy::new(1, 3);
    p.constraint = Some((ConstraintKind::Inequality, 0.0, 500.0));
    p.constrained_steps = vec![0];
    let g = rollout_batch(&p, &constant_actor(-0.5), &zero_noise(&p, 2), RolloutOptions::eval_penalized()).unwrap();
    assert_eq!(g.result.total_cost, vec![125.0, 125.0]);
    let unpenalized = RolloutOptions { penalized: false, ..RolloutOptions::eval_penalized() };
    let g = rollout_batch(&p, &constant_actor(-0.5), &zero_noise(&p, 2), unpenalized).unwrap();
    assert_eq!(g.result.total_cost, vec![0.0, 0.0]);
    assert_eq!(g.result.penalties(), vec![125.0, 125.0]);
}

#[test]
fn cumulative_costs_are_additive_and_recomputable() {
    let mut p = Toy::new(2, 4);
    p.ca = 0.3;
    p.cs = 1.1;
    p.ct = 2.0;
    p.noise_scale = 0.5;
    p.constraint = Some((ConstraintKind::Inequality, 0.1, 4.0));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let policy = StackedPolicy::init(&p, &[5], true, &mut rng).unwrap();
    let noise = p.sample_noise(&mut rng, 8);
    for penalized in [true, false] {
        let opts = RolloutOptions { penalized, ..RolloutOptions::train() };
        let r = rollout_batch(&p, &policy, &noise, opts).unwrap().result;
        for i in 0..8 {
            let t = p.horizon;
            assert!((r.total_cost[i] - (r.cumulative[t - 1][i] + r.terminal_cost[i])).abs() <= 1e-12);
            let mut total = 0.0;
            for step in 0..t {
                let s = r.states[step].row(i);
                let a = r.controls[step].row(i);
                let c: f64 = 0.3 * a.iter().map(|v| v * v).sum::<f64>() + 1.1 * s.iter().map(|v| v * v).sum::<f64>();
                let pen: f64 = 4.0 * a.iter().map(|v| (v - 0.1).min(0.0).powi(2)).sum::<f64>();
                assert!((r.step_penalties[step][i] - pen).abs() <= 1e-12);
                total += c + if penalized { pen } else { 0.0 };
            }
            total += 2.0 * r.states[t].row(i).iter().map(|v| v * v).sum::<f64>();
            assert!((r.total_cost[i] - total).abs() <= 1e-12 * total.abs().max(1.0), "{} vs {total}", r.total_cost[i]);
        }
    }
}

#[test]
fn controls_ignore_future_noise() {
    let mut p = Toy::new(2, 4);
    p.noise_scale = 1.0;
    p.cs = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let policy = StackedPolicy::init(&p, &[8, 8], true, &mut rng).unwrap();
    let noise = p.sample_noise(&mut rng, 6);
    for mode in [Mode::Train, Mode::Eval] {
        let opts = RolloutOptions { mode, ..RolloutOptions::train() };
        let base = rollout_batch(&p, &policy, &noise, opts).unwrap().result;
        for t in 0..p.horizon {
            let mut perturbed = noise.clone();
            let shape = perturbed.shape().to_vec();
            for i in 0..shape[0] {
                for tau in t..shape[1] {
                    for k in 0..shape[2] {
                        perturbed.data_mut()[(i * shape[1] + tau) * shape[2] + k] += 3.0 + tau as f64;
                    }
                }
            }
            let r = rollout_batch(&p, &policy, &perturbed, opts).unwrap().result;
            for tau in 0..=t {
                assert_eq!(r.controls[tau].data(), base.controls[tau].data(), "{mode:?} t {t} tau {tau}");
            }
            if t + 1 < p.horizon {
                assert_ne!(r.controls[t + 1].data(), base.controls[t + 1].data());
            }
        }
    }
}

#[test]
fn first_subnetwork_has_no_batch_norm() {
    let p = Toy::new(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let policy = StackedPolicy::init(&p, &[4], true, &mut rng).unwrap();
    assert!(!policy.subnets[0].has_batch_norm());
    assert!(policy.subnets[1..].iter().all(|s| s.has_batch_norm()));
    let plain = StackedPolicy::init(&p, &[4], false, &mut rng).unwrap();
    assert!(plain.subnets.iter().all(|s| !s.has_batch_norm()));
}

#[test]
fn noise_shape_is_checked() {
    let p = Toy::new(2, 3);
    let bad = Tensor::zeros(&[4, 2, 2]);
    assert!(matches!(
        rollout_batch(&p, &constant_actor(0.0), &bad, RolloutOptions::eval_penalized()),
        Err(ControlError::Shape { what: "noise", .. })
    ));
}

#[test]
fn non_finite_state_names_the_timestep() {
    let mut p = Toy::new(1, 3);
    p.blow_up_at = Some(1);
    let err = rollout_batch(&p, &constant_actor(0.0), &zero_noise(&p, 2), RolloutOptions::eval_penalized())
        .err()
        .unwrap();
    assert!(matches!(err, ControlError::Step { t: 1, .. }), "{err}");
    assert!(err.to_string().contains("timestep 1"));
}

#[test]
fn evaluation_without_constraints_is_the_plain_rollout_mean() {
    let mut p = Toy::new(2, 3);
    p.noise_scale = 0.3;
    p.cs = 1.0;
    p.ca = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let policy = StackedPolicy::init(&p, &[5], true, &mut rng).unwrap();
    let report = evaluate(&p, &policy, 1500, 42).unwrap();
    let mut test_rng = stream_rng(42, Stream::Test);
    let mut values = Vec::new();
    for rows in [1024, 476] {
        let noise = p.sample_noise(&mut test_rng, rows);
        let g = rollout_batch(&p, &policy, &noise, RolloutOptions::eval_penalized()).unwrap();
        values.extend(g.result.total_cost);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    assert_eq!(report.values, values);
    assert!((report.mean - mean).abs() < 1e-12);
    assert!(report.feasible());
    assert!(report.std_error > 0.0);
}

#[test]
fn evaluation_projects_controls() {
    let mut p = Toy::new(1, 2);
    p.constraint = Some((ConstraintKind::Inequality, 0.2, 10.0));
    p.ca = 1.0;
    let report = evaluate(&p, &constant_actor(-1.0), 10, 0).unwrap();
    assert_eq!(report.max_violation, 0.0);
    assert!((report.mean - 2.0 * 0.04).abs() < 1e-15);
}

#[test]
fn relative_metric_examples() {
    assert_eq!(relative_metric(100.0, 100.0, Sense::Minimize).unwrap(), 1.0);
    assert!((relative_metric(1.009 * 37.0, 37.0, Sense::Minimize).unwrap() - 1.009).abs() < 1e-12);
    assert!((relative_metric(0.995 * 12.5, 12.5, Sense::Maximize).unwrap() - 0.995).abs() < 1e-12);
    assert!(matches!(relative_metric(1.0, 0.0, Sense::Minimize), Err(ControlError::ZeroBenchmark)));
}

#[test]
fn zero_iterations_return_the_initial_policy() {
    let mut p = Toy::new(2, 3);
    p.cs = 1.0;
    let cfg = small_config(5, 0);
    let out = train(&p, &cfg).unwrap();
    let mut rng = stream_rng(5, Stream::Init);
    let init = StackedPolicy::init(&p, &cfg.hidden, true, &mut rng).unwrap();
    assert_eq!(out.policy, init);
    assert_eq!(out.curve.points.len(), 1);
    assert_eq!(out.curve.points[0].iteration, 0);
}

#[test]
fn training_is_bitwise_reproducible_and_improves() {
    let mut p = Toy::new(2, 3);
    p.cs = 1.0;
    p.ca = 0.5;
    p.ct = 1.0;
    p.noise_scale = 0.2;
    let cfg = small_config(9, 60);
    let a = train(&p, &cfg).unwrap();
    let b = train(&p, &cfg).unwrap();
    assert_eq!(a.curve.points, b.curve.points);
    assert_eq!(a.policy, b.policy);
    let iters: Vec<u64> = a.curve.points.iter().map(|c| c.iteration).collect();
    assert_eq!(iters, (0..=60).step_by(5).collect::<Vec<_>>());
    let first = &a.curve.points[0];
    let last = a.curve.points.last().unwrap();
    assert!(last.val_objective_projected < 0.8 * first.val_objective_projected, "{first:?} {last:?}");
    let other = train(&p, &small_config(10, 60)).unwrap();
    assert_ne!(other.curve.points, a.curve.points);
}

#[test]
fn divergence_aborts_with_partial_curve() {
    let mut p = Toy::new(1, 2);
    p.cs = 1.0;
    p.ct = 1.0;
    let mut cfg = small_config(1, 50);
    cfg.learning_rate = LearningRateSchedule::constant(1e200);
    cfg.validation_every = 1;
    match train(&p, &cfg) {
        Err(ControlError::Diverged { iteration, curve }) => {
            assert!(iteration > 0);
            assert!(!curve.points.is_empty());
            assert!(curve.points.iter().all(|c| c.iteration < iteration));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.curve)),
    }
}

#[test]
fn invalid_training_configs_are_rejected() {
    let p = Toy::new(1, 2);
    let mut cfg = small_config(0, 1);
    cfg.batch_size = 1;
    assert!(matches!(train(&p, &cfg), Err(ControlError::Config(_))));
    cfg.use_batchnorm = false;
    assert!(train(&p, &cfg).is_ok());
    cfg.validation_every = 0;
    assert!(train(&p, &cfg).is_err());
}

fn random_gradcheck_problem(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Toy::new(2, 3);
    p.s0 = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    p.noise_scale = rng.random_range(0.1..1.0);
    p.ca = rng.random_range(0.1..2.0);
    p.cs = rng.random_range(0.1..2.0);
    p.ct = rng.random_range(0.1..2.0);
    p.constraint = Some((ConstraintKind::Inequality, rng.random_range(-0.5..0.5), 3.0));
    p
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for seed in 0..3 {
        let p = random_gradcheck_problem(seed);
        let report = gradient_check(&p, &[5, 5], true, seed, &GradCheckOptions::default()).unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
        assert!(report.kink_margin >= 1e-4);
    }
}

#[test]
fn corrupted_backward_rule_is_detected() {
    let p = CorruptedBackward(random_gradcheck_problem(1));
    let report = gradient_check(&p, &[5, 5], true, 1, &GradCheckOptions::default()).unwrap();
    assert!(!report.passed);
    let worst = report.worst.unwrap();
    assert!(worst.relative_error > 1e-2);
    assert!(worst.timestep < 3);
}

#[test]
fn fully_forced_policy_passes_vacuously() {
    let mut p = Toy::new(2, 3);
    p.all_forced = true;
    p.cs = 1.0;
    let report = gradient_check(&p, &[3], false, 0, &GradCheckOptions::default()).unwrap();
    assert!(report.passed);
    assert_eq!(report.relative_error, 0.0);
    assert!(report.worst.is_none());
}

#[test]
fn policy_checkpoint_round_trip() {
    let p = Toy::new(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut policy = StackedPolicy::init(&p, &[4, 4], true, &mut rng).unwrap();
    policy.input_scale = vec![0.5, 2.0];
    let back = StackedPolicy::from_checkpoint(policy.to_checkpoint()).unwrap();
    assert_eq!(back, policy);
    assert!(back.check_against(&p).is_ok());
    assert!(back.check_against(&Toy::new(2, 4)).is_err());
}
