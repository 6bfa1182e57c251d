use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dft_core::data::Example;
use dft_core::fcco::{
    gradient_estimate, metrics_csv, train, update_estimators, evaluate_batch, update_u_linear, update_u_log, AdamW,
    CandidateSource, DftSettings, EstimatorState, FixedCandidates, LrSchedule, Method, MinibatchItem, SchedulerKind,
    TrainConfig, Trainer, METRICS_HEADER,
};
use dft_core::model::{ModelConfig, ModelParams, TokenSequence};
use dft_core::numeric::max_relative_error;
use dft_core::objectives::{Candidate, ScoringMode, Variant};
use dft_core::oracle::{exact_objective, finite_difference_grad, OutputSpace};
use dft_core::Error;

#[test]
fn linear_update_arithmetic() {
    assert_eq!(update_u_linear(5.0, 3.0, 1.0).unwrap(), 3.0);
    assert!((update_u_linear(1.0, 3.0, 0.85).unwrap() - 2.7).abs() < 1e-15);
    let (u0, m1, m2) = (2.0, 5.0, 11.0);
    let u = update_u_linear(update_u_linear(u0, m1, 0.5).unwrap(), m2, 0.5).unwrap();
    assert!((u - (0.25 * u0 + 0.25 * m1 + 0.5 * m2)).abs() < 1e-12);
    assert!(update_u_linear(f64::NAN, 1.0, 0.5).is_err());
    assert!(update_u_linear(1.0, 1.0, 0.0).is_err());
}

#[test]
fn log_update_matches_linear_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5000 {
        let lu: f64 = rng.random_range(-20.0..20.0);
        let lw: Vec<f64> = (0..rng.random_range(1..5)).map(|_| rng.random_range(-20.0..20.0)).collect();
        let gamma = rng.random_range(0.01..=1.0);
        let mean = lw.iter().map(|w| w.exp()).sum::<f64>() / lw.len() as f64;
        let lin = update_u_linear(lu.exp(), mean, gamma).unwrap();
        let log = update_u_log(lu, &lw, gamma).unwrap();
        assert!((log.exp() - lin).abs() / lin < 1e-12);
    }
}

#[test]
fn log_update_symmetric_point_adds_ln2() {
    let gamma: f64 = 0.3;
    let lu = 4.0;
    // choose the weight so that log(1−γ) + ū = log γ + w
    let w = (1.0 - gamma).ln() + lu - gamma.ln();
    let got = update_u_log(lu, &[w], gamma).unwrap();
    assert!((got - ((1.0 - gamma).ln() + lu + std::f64::consts::LN_2)).abs() < 1e-12);
}

#[test]
fn log_update_far_from_representable_range() {
    let got = update_u_log(-5000.0, &[-6000.0], 0.85).unwrap();
    assert!((got - -5001.897_120).abs() < 1e-5, "{got}");
    assert!(update_u_log(1e6, &[-1e6], 0.5).unwrap().is_finite());
    assert!(update_u_log(-1e6, &[1e6], 0.5).unwrap().is_finite());
    assert!(update_u_log(0.0, &[], 0.5).is_err());
    assert!(update_u_log(0.0, &[f64::INFINITY], 0.5).is_err());
}

#[test]
fn fixed_batch_mean_converges_geometrically() {
    let gamma = 0.3;
    let target: f64 = 4.0;
    let mut u: f64 = 1.0;
    for t in 1..=40 {
        u = update_u_log(u.ln(), &[target.ln()], gamma).unwrap().exp();
        let bound = (1.0f64 - gamma).powi(t) * (1.0 - target).abs();
        assert!((u - target).abs() <= bound + 1e-12);
    }
}

#[test]
fn estimator_fuzz_stays_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut state = EstimatorState::new(16);
    for _ in 0..10_000 {
        let i = rng.random_range(0..16);
        let lw: Vec<f64> = (0..rng.random_range(1..4)).map(|_| rng.random_range(-1e4..0.0)).collect();
        let gamma = rng.random_range(0.01..=1.0);
        assert!(state.update(i, &lw, gamma).unwrap().is_finite());
    }
    assert!(state.values().iter().all(|v| v.is_finite()));
}

#[test]
fn adamw_first_step_closed_form_and_two_step_trace() {
    let mut opt = AdamW::new(2, 0.0);
    let mut p = vec![1.0, -2.0];
    opt.step(&mut p, &[0.0, 0.0], 0.1).unwrap();
    assert_eq!(p, vec![1.0, -2.0]);

    let mut opt = AdamW::new(2, 0.0);
    let mut p = vec![1.0, -2.0];
    let g = [0.5, -3.0];
    opt.step(&mut p, &g, 0.1).unwrap();
    for i in 0..2 {
        let want = [1.0, -2.0][i] - 0.1 * g[i] / (g[i].abs() + 1e-8);
        assert!((p[i] - want).abs() < 1e-12);
    }

    // hand trace: two steps with weight decay 0.01, lr 0.1
    let mut opt = AdamW::new(2, 0.01);
    let mut p = vec![1.0, -2.0];
    let gs = [[0.5, -3.0], [0.25, 1.0]];
    let mut want = [1.0f64, -2.0];
    let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
    for (t, g) in gs.iter().enumerate() {
        opt.step(&mut p, g, 0.1).unwrap();
        let t = t as i32 + 1;
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            want[i] -= 0.1 * (mh / (vh.sqrt() + 1e-8) + 0.01 * want[i]);
        }
    }
    assert!((p[0] - want[0]).abs() < 1e-12 && (p[1] - want[1]).abs() < 1e-12);
    assert_eq!(opt.steps(), 2);

    let before = p.clone();
    assert!(opt.step(&mut p, &[f64::NAN, 0.0], 0.1).is_err());
    assert_eq!(p, before);
}

#[test]
fn schedule_warmup_then_cosine() {
    let s = LrSchedule::new(SchedulerKind::Cosine, 1e-3, 0.1, 100);
    assert_eq!(s.lr_at(0), 0.0);
    assert!((s.lr_at(5) - 5e-4).abs() < 1e-15);
    assert!((s.lr_at(10) - 1e-3).abs() < 1e-15);
    assert!(s.lr_at(55) < 1e-3 && s.lr_at(55) > 0.0);
    assert!(s.lr_at(100).abs() < 1e-15);
    let c = LrSchedule::new(SchedulerKind::Constant, 2e-3, 0.0, 10);
    assert!((0..10).all(|t| c.lr_at(t) == 2e-3));
}

fn tiny_data(space: &OutputSpace, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Example {
            x: TokenSequence::prompt((0..2).map(|_| rng.random_range(1..2)).collect()),
            y: space.sequences()[rng.random_range(0..space.len())].clone(),
            y_bad: None,
        })
        .collect()
}

#[test]
fn exact_regime_estimate_is_objective_gradient() {
    let space = OutputSpace::new(2, 2).unwrap();
    let cands = space.uniform_candidates();
    for seed in 0..3 {
        let p = ModelParams::init(ModelConfig::new(2, 8, 2, 8), seed);
        let data = tiny_data(&space, 3, seed);
        let s = DftSettings {
            tau: 1.0,
            gamma: 1.0,
            mode: ScoringMode::Unnormalized,
            variant: Variant::Dft,
        };
        let batch: Vec<MinibatchItem> = data
            .iter()
            .enumerate()
            .map(|(i, e)| MinibatchItem {
                index: i,
                x: &e.x,
                y_pos: &e.y,
                candidates: cands.clone(),
            })
            .collect();
        let mut state = EstimatorState::new(data.len());
        let scores = evaluate_batch(&p, &batch, &s).unwrap();
        update_estimators(&mut state, &batch, &scores, 1.0).unwrap();
        let g = gradient_estimate(&p, &batch, &state, &s).unwrap();
        let fd = finite_difference_grad(|q| exact_objective(q, &data, &space, 1.0, ScoringMode::Unnormalized), &p, 1e-5)
            .unwrap();
        assert!(max_relative_error(&g.grad, &fd) < 1e-4);
    }
}

#[test]
fn estimate_checks_state_shape() {
    let p = ModelParams::init(ModelConfig::new(3, 8, 1, 8), 0);
    let x = TokenSequence::prompt(vec![1]);
    let y = TokenSequence::answer(vec![2, 0]);
    let batch = vec![MinibatchItem {
        index: 4,
        x: &x,
        y_pos: &y,
        candidates: vec![Candidate::new(y.clone(), -1.0, 0).unwrap()],
    }];
    let s = DftSettings {
        tau: 1.0,
        gamma: 0.9,
        mode: ScoringMode::Unnormalized,
        variant: Variant::Dft,
    };
    assert!(gradient_estimate(&p, &batch, &EstimatorState::new(2), &s).is_err());
}

fn small_task() -> (Vec<Example>, ModelParams, OutputSpace) {
    let space = OutputSpace::new(3, 2).unwrap();
    let data = vec![
        Example::new(vec![1, 2], vec![1, 0], None),
        Example::new(vec![2, 2], vec![2, 0], None),
        Example::new(vec![2, 1], vec![0], None),
    ];
    (data, ModelParams::init(ModelConfig::new(3, 8, 1, 8), 5), space)
}

#[test]
fn zero_learning_rate_keeps_parameters_and_logs() {
    let (data, base, space) = small_task();
    let src = FixedCandidates::shared(data.len(), space.uniform_candidates());
    let mut cfg = TrainConfig::for_method(Method::Dft);
    cfg.lr = 0.0;
    cfg.batch_size = 2;
    let out = train(&data, Some(&src as &dyn CandidateSource), &base, &cfg).unwrap();
    assert_eq!(out.params, base);
    assert_eq!(out.metrics.len(), 2 * cfg.epochs);
    assert!(metrics_csv(&out.metrics).starts_with(METRICS_HEADER));
}

#[test]
fn single_example_descent_is_monotone() {
    let (data, base, space) = small_task();
    let data = &data[..1];
    let src = FixedCandidates::shared(1, space.uniform_candidates());
    let mut cfg = TrainConfig::for_method(Method::Dft);
    cfg.gamma = 1.0;
    cfg.epochs = 200;
    cfg.batch_size = 1;
    cfg.lr = 1e-4;
    cfg.warmup_ratio = 0.0;
    cfg.scheduler = SchedulerKind::Constant;
    cfg.weight_decay = 0.0;
    let mut t = Trainer::new(data, Some(&src as &dyn CandidateSource), &base, base.clone(), cfg).unwrap();
    let mut prev = exact_objective(t.params(), data, &space, 1.0, ScoringMode::Unnormalized).unwrap();
    let start = prev;
    while t.step().unwrap().is_some() {
        let f = exact_objective(t.params(), data, &space, 1.0, ScoringMode::Unnormalized).unwrap();
        assert!(f <= prev + 1e-9, "{f} after {prev}");
        prev = f;
    }
    assert!(prev < start);
}

#[test]
fn seeded_runs_are_bitwise_identical() {
    let (data, base, space) = small_task();
    let src = FixedCandidates::shared(data.len(), space.uniform_candidates());
    let mut cfg = TrainConfig::for_method(Method::Dft2);
    cfg.batch_size = 2;
    cfg.epochs = 4;
    cfg.seed = 13;
    let a = train(&data, Some(&src as &dyn CandidateSource), &base, &cfg).unwrap();
    let b = train(&data, Some(&src as &dyn CandidateSource), &base, &cfg).unwrap();
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(a.params, b.params);
}

#[test]
fn pool_methods_need_candidates_and_dpo_needs_losers() {
    let (data, base, _) = small_task();
    assert!(matches!(
        train(&data, None, &base, &TrainConfig::for_method(Method::Dft)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        train(&data, None, &base, &TrainConfig::for_method(Method::Dpo)),
        Err(Error::Config(_))
    ));
    assert!(train(&data, None, &base, &TrainConfig::for_method(Method::Sft)).is_ok());
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = TrainConfig::for_method(Method::Dft);
    cfg.gamma = 0.0;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::for_method(Method::Dft);
    cfg.tau = -1.0;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::for_method(Method::Dft);
    cfg.neg_per_example = 0;
    assert!(cfg.validate().is_err());
}
