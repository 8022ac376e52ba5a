use llpcs::autodiff::{init_model, OptimizerKind, OptimizerState};
use llpcs::bagging::{build_bags, Regime};
use llpcs::data::{generate_synthetic, Dataset, Domain, FeatureSchema, Features, SynthSpec};
use llpcs::losses::{LossSpec, Method};
use llpcs::trainer::{
    dann_step, evaluate, grid_search, make_minibatches, multi_run, run_once, summary_json, train, write_results_csv,
    Experiment, GridSpec, Seeds, SourceRows, TrainConfig,
};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_experiment(seed: u64) -> Experiment {
    let spec = SynthSpec {
        dim: 4,
        n_source: 160,
        n_target: 160,
        n_test: 60,
        label_hidden: vec![8],
        ..SynthSpec::default()
    };
    let out = generate_synthetic(&spec, seed).unwrap();
    Experiment::new(out.source, out.target, out.test)
}

fn small_config(method: Method) -> TrainConfig {
    TrainConfig {
        hidden: vec![6, 5],
        epochs: 3,
        bags_per_batch: 4,
        lr: 1e-2,
        ..TrainConfig::for_method(method)
    }
}

#[test]
fn bl_wfa_without_alignment_is_lr() {
    let exp = small_experiment(1);
    let bags = build_bags(&exp.target, &Regime::Random { k: 4 }, 3).unwrap();
    let lr = train(&exp.source, &exp.target, &bags, &small_config(Method::Lr)).unwrap();
    let mut cfg = small_config(Method::BlWfa);
    cfg.loss.lambda3 = 0.0;
    cfg.source_rows = Some(SourceRows::PerMember);
    let wfa = train(&exp.source, &exp.target, &bags, &cfg).unwrap();
    for (a, b) in wfa.step_losses.iter().zip(&lr.step_losses) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    for (a, b) in wfa.model.params().iter().zip(lr.model.params()) {
        let gap = (a - b).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        assert!(gap <= 1e-12, "parameter gap {gap:e}");
    }
}

#[test]
fn dann_without_adversary_weight_trains_like_lr() {
    let exp = small_experiment(2);
    let bags = build_bags(&exp.target, &Regime::Random { k: 4 }, 5).unwrap();
    let lr = train(&exp.source, &exp.target, &bags, &small_config(Method::Lr)).unwrap();
    let mut cfg = small_config(Method::LrDann);
    cfg.loss.lambda_d = 0.0;
    let dann = train(&exp.source, &exp.target, &bags, &cfg).unwrap();
    let a = lr.model.predict(&exp.target.features).unwrap().preds;
    let b = dann.model.predict(&exp.target.features).unwrap().preds;
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
    }
}

#[test]
fn adversarial_phases_touch_disjoint_parameters() {
    let exp = small_experiment(3);
    let bags = build_bags(&exp.target, &Regime::Random { k: 4 }, 1).unwrap();
    let cfg = small_config(Method::AfDann);
    let mut stream = make_minibatches(&exp.source, &bags, Some(SourceRows::PerMember), 4, 0).unwrap();
    let batch = stream.epoch()[0].materialize(&exp.source, &exp.target, &bags);
    let fresh = init_model(&cfg.arch(4, vec![]), 0).unwrap();
    let domain = fresh.domain_slots();
    let body = fresh.body_slots();
    let spec = LossSpec {
        lambda_d: 1.0,
        ..cfg.loss.clone()
    };

    let changed = |before: &llpcs::autodiff::Model, after: &llpcs::autodiff::Model, slots: &[usize]| {
        slots.iter().any(|&s| before.params()[s] != after.params()[s])
    };

    // Phase one only: the domain optimizer owns no slots.
    let mut m = fresh.clone();
    let mut body_opt = OptimizerState::for_slots(OptimizerKind::Adam, 1e-2, &m, body.clone());
    let mut idle = OptimizerState::for_slots(OptimizerKind::Adam, 1e-2, &m, vec![]);
    dann_step(&mut m, &batch, &spec, &mut body_opt, &mut idle).unwrap();
    assert!(changed(&fresh, &m, &body));
    assert!(!changed(&fresh, &m, &domain));

    // Phase two only.
    let mut m = fresh.clone();
    let mut idle = OptimizerState::for_slots(OptimizerKind::Adam, 1e-2, &m, vec![]);
    let mut dom_opt = OptimizerState::for_slots(OptimizerKind::Adam, 1e-2, &m, domain.clone());
    dann_step(&mut m, &batch, &spec, &mut idle, &mut dom_opt).unwrap();
    assert!(!changed(&fresh, &m, &body));
    assert!(changed(&fresh, &m, &domain));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let exp = small_experiment(4);
    for method in Method::ALL {
        let cfg = small_config(method);
        let a = run_once(&exp, &Regime::Random { k: 8 }, &cfg).unwrap();
        let b = run_once(&exp, &Regime::Random { k: 8 }, &cfg).unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses, "{method}");
        assert_eq!(a.test_mse.to_bits(), b.test_mse.to_bits(), "{method}");
    }
}

#[test]
fn results_csv_is_byte_identical_on_repeat() {
    let exp = small_experiment(5);
    let render = || {
        let m = multi_run(&exp, &Regime::Random { k: 4 }, &small_config(Method::BlWfa), 3).unwrap();
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &m.runs, false).unwrap();
        (buf, summary_json(&m.runs).unwrap())
    };
    let (csv_a, json_a) = render();
    let (csv_b, json_b) = render();
    assert_eq!(csv_a, csv_b);
    assert_eq!(json_a, json_b);
    let text = String::from_utf8(csv_a).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("method,k,regime,lr,"));
}

#[test]
fn trials_use_distinct_seeds() {
    let exp = small_experiment(6);
    let m = multi_run(&exp, &Regime::Random { k: 4 }, &small_config(Method::Lr), 3).unwrap();
    let seeds: Vec<Seeds> = m.runs.iter().map(|r| r.config.seeds).collect();
    assert_eq!(seeds[1], Seeds::default().for_trial(1));
    assert!(m.runs[0].test_mse != m.runs[1].test_mse);
}

#[test]
fn shuffle_seed_does_not_change_bags_or_init() {
    let exp = small_experiment(7);
    let mut a = small_config(Method::BlWfa);
    let mut b = a.clone();
    a.seeds.shuffle = 10;
    b.seeds.shuffle = 11;
    let regime = Regime::Random { k: 4 };
    assert_eq!(
        build_bags(&exp.target, &regime, a.seeds.bagging).unwrap(),
        build_bags(&exp.target, &regime, b.seeds.bagging).unwrap()
    );
    assert_eq!(init_model(&a.arch(4, vec![]), a.seeds.model).unwrap(), init_model(&b.arch(4, vec![]), b.seeds.model).unwrap());
    let ra = run_once(&exp, &regime, &a).unwrap();
    let rb = run_once(&exp, &regime, &b).unwrap();
    assert!(ra.epoch_losses != rb.epoch_losses, "shuffle seed must reorder batches");
}

#[test]
fn test_split_is_read_once_per_run_and_never_by_selection() {
    let exp = small_experiment(8);
    let grid = GridSpec {
        lrs: vec![1e-3, 1e-2],
        lambdas: vec![0.1, 1.0],
        validation_fraction: 0.2,
    };
    let res = grid_search(&exp, &Regime::Random { k: 4 }, &small_config(Method::BlWfa), &grid).unwrap();
    assert_eq!(res.rows.len(), 4);
    assert_eq!(exp.test.reads(), 0);
    run_once(&exp, &Regime::Random { k: 4 }, &res.best).unwrap();
    assert_eq!(exp.test.reads(), 1);
}

#[test]
fn grid_without_lambda_sweeps_learning_rate_only() {
    let exp = small_experiment(9);
    let grid = GridSpec {
        lrs: vec![1e-3, 1e-2, 1e-1],
        ..GridSpec::default()
    };
    let res = grid_search(&exp, &Regime::Random { k: 4 }, &small_config(Method::BaggedTarget), &grid).unwrap();
    assert_eq!(res.rows.len(), 3);
    assert!(res.rows.iter().all(|r| r.lambda.is_none()));
    assert_eq!(res.rows.iter().filter(|r| r.best).count(), 1);
}

/// Singleton bags with labels linear in the features: a linear model trained
/// on the bag loss recovers the map.
#[test]
fn singleton_bags_learn_a_linear_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = [1.5, -2.0, 0.5];
    let make = |rng: &mut ChaCha8Rng, n: usize, domain| {
        let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let y = x.rows().into_iter().map(|r| r[0] * w[0] + r[1] * w[1] + r[2] * w[2] + 0.25).collect();
        Dataset::new(Features::from_numeric(x), y, domain, FeatureSchema::numeric_only(3)).unwrap()
    };
    let source = make(&mut rng, 50, Domain::Source);
    let target = make(&mut rng, 400, Domain::Target);
    let test = make(&mut rng, 100, Domain::Target);
    let bags = build_bags(&target, &Regime::Random { k: 1 }, 0).unwrap();
    let cfg = TrainConfig {
        hidden: vec![],
        epochs: 60,
        bags_per_batch: 16,
        lr: 0.05,
        ..TrainConfig::for_method(Method::BaggedTarget)
    };
    let out = train(&source, &target, &bags, &cfg).unwrap();
    let mse = evaluate(&out.model, &test).unwrap();
    assert!(mse < 1e-4, "test MSE {mse}");
}

#[test]
fn divergence_is_reported_with_context() {
    let exp = small_experiment(10);
    let cfg = TrainConfig {
        lr: 1e6,
        optimizer: OptimizerKind::Sgd,
        epochs: 5,
        ..small_config(Method::Lr)
    };
    let err = run_once(&exp, &Regime::Random { k: 4 }, &cfg).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("epoch"), "{msg}");
}
