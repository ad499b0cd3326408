use super::*;
use crate::data::{pairwise_labels, Family};
use crate::loss::{class_balance_weights, PriorModel};
use crate::metric::{check_metric, MetricMode};
use crate::model::{MetricConfig, ModelConfig};

fn tiny_model(k_max: usize, mode: MetricMode, n: usize) -> ModelConfig {
    ModelConfig {
        k_max,
        layers: 2,
        fc_units: 8,
        count_units: 4,
        metric: MetricConfig {
            mode,
            concat: false,
            set_size: if mode.is_active() { n } else { 0 },
        },
        seed: 9,
        ..ModelConfig::desk()
    }
}

fn tiny_train(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_sets: 4,
        set_size: 8,
        steps,
        seed: 21,
        validation_interval: 2,
        validation_episodes: 6,
        patience: 0,
        ..TrainConfig::default()
    }
}

fn spec(k_max: usize) -> GeneratorSpec {
    GeneratorSpec::new(vec![Family::GaussianBlobs, Family::ConcentricRings], k_max)
}

#[test]
fn config_validation() {
    TrainConfig::default().validate().unwrap();
    let bad = [
        TrainConfig { batch_sets: 0, ..Default::default() },
        TrainConfig { set_size: 1, ..Default::default() },
        TrainConfig { lambda: -1.0, ..Default::default() },
        TrainConfig { learning_rate: 0.0, ..Default::default() },
        TrainConfig { adadelta_rho: 1.0, ..Default::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::InvalidConfig { .. })));
    }
}

#[test]
fn adadelta_zero_gradient_is_fixed_point() {
    let config = tiny_model(3, MetricMode::None, 8);
    let mut params = Params::<f64>::init(&config);
    let before = params.clone();
    let mut state = OptimizerState::new(&params);
    let zero = params.zeros_like();
    adadelta_step(&mut state, &mut params, &zero, 0.95, 1e-8, 5.0).unwrap();
    assert_eq!(params, before);
    assert_eq!(state.step, 1);
}

#[test]
fn adadelta_hand_step() {
    let config = tiny_model(3, MetricMode::None, 8);
    let mut params = Params::<f64>::zeros(&config);
    let mut state = OptimizerState::new(&params);
    let mut grad = params.zeros_like();
    grad.count_out.b[0] = 1.0;
    let (rho, eps, lr) = (0.95, 1e-8, 1.0);
    adadelta_step(&mut state, &mut params, &grad, rho, eps, lr).unwrap();
    // v = 0.05, delta = sqrt(eps) / sqrt(0.05 + eps), u = 0.05 delta^2.
    let v = (1.0 - rho) * 1.0;
    let delta = (0.0 + eps as f64).sqrt() / (v + eps).sqrt();
    assert!((params.count_out.b[0] + delta).abs() < 1e-18);
    assert!((state.v.count_out.b[0] - v).abs() < 1e-15);
    assert!((state.u.count_out.b[0] - (1.0 - rho) * delta * delta).abs() < 1e-24);
    assert_eq!(params.count_out.b[1], 0.0);

    let mut nan = grad.clone();
    nan.count_out.b[1] = f64::NAN;
    assert!(matches!(
        adadelta_step(&mut state, &mut params, &nan, rho, eps, lr),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn clipping_caps_the_norm() {
    let config = tiny_model(3, MetricMode::None, 8);
    let mut g = Params::<f64>::init(&config);
    g.scale(100.0);
    let before = clip_global_norm(&mut g, 10.0);
    assert!(before > 10.0);
    assert!((g.norm_sq().sqrt() - 10.0).abs() < 1e-9);
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let model = Model::<f32>::new(tiny_model(3, MetricMode::None, 8)).unwrap();
    let (trained, history) = train(model.clone(), tiny_train(0), spec(3)).unwrap();
    assert_eq!(trained, model);
    assert!(history.steps.is_empty());
}

#[test]
fn equal_seeds_give_equal_runs() {
    let run = || {
        let model = Model::<f32>::new(tiny_model(3, MetricMode::None, 8)).unwrap();
        train(model, tiny_train(5), spec(3)).unwrap()
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha.to_log(), hb.to_log());
    assert_eq!(ha.steps.len(), 5);
    let steps: Vec<u64> = ha.steps.iter().map(|s| s.step).collect();
    assert_eq!(steps, vec![0, 1, 2, 3, 4]);
    assert_eq!(ha.validations.len(), 3);
}

#[test]
fn initial_loss_at_uniform_outputs() {
    let k_max = 3;
    let mut model = Model::<f64>::new(tiny_model(k_max, MetricMode::None, 8)).unwrap();
    for d in [&mut model.params.count_out, &mut model.params.assignment] {
        d.w.fill(0.0);
        d.b.fill(0.0);
    }
    let config = tiny_train(1);
    let batch = training_batch(&spec(k_max), &config, 0).unwrap();
    let w = class_balance_weights(config.set_size, k_max, PriorModel::IndependentUniformNonEmpty).unwrap();
    let (values, _) = batch_gradient(&model, &batch, &w, config.lambda).unwrap();

    // Uniform outputs: P_ij = (1/k_max) sum_k 1/k for every pair.
    let p: f64 = (1..=k_max).map(|k| 1.0 / k as f64).sum::<f64>() / k_max as f64;
    let n = config.set_size;
    let mut l_ca = 0.0;
    for set in &batch.sets {
        let y = pairwise_labels(&set.labels);
        let same = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| y.same(i, j)).count() as f64;
        let pairs = (n * (n - 1) / 2) as f64;
        l_ca += -(w.phi1 * same * p.ln() + w.phi2 * (pairs - same) * (1.0 - p).ln()) / pairs;
    }
    l_ca /= batch.sets.len() as f64;
    let expected = (k_max as f64).ln() + config.lambda * l_ca;
    assert!((values.l_tot - expected).abs() < 1e-10, "{} vs {expected}", values.l_tot);

    // A freshly initialized network sits close to that value.
    let fresh = Model::<f64>::new(tiny_model(k_max, MetricMode::None, 8)).unwrap();
    let (v0, _) = batch_gradient(&fresh, &batch, &w, config.lambda).unwrap();
    assert!((v0.l_tot - expected).abs() < 0.5, "{} vs {expected}", v0.l_tot);
}

#[test]
fn metric_invariants_hold_after_every_step() {
    for mode in [MetricMode::Euclidean, MetricMode::Diagonal, MetricMode::Full] {
        let model = Model::<f32>::new(tiny_model(3, mode, 8)).unwrap();
        let mut trainer = Trainer::new(model, TrainConfig { validation_interval: 0, ..tiny_train(4) }, spec(3)).unwrap();
        for _ in 0..4 {
            trainer.train_step().unwrap();
            check_metric(&trainer.model.params.metric.as_ref().unwrap().a, mode).unwrap();
        }
    }
}

#[test]
fn metric_set_size_must_match() {
    let model = Model::<f32>::new(tiny_model(3, MetricMode::Full, 10)).unwrap();
    assert!(Trainer::new(model, tiny_train(1), spec(3)).is_err());
}

#[test]
fn resume_reproduces_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let fresh = || Model::<f32>::new(tiny_model(3, MetricMode::Full, 8)).unwrap();

    let mut straight = Trainer::new(fresh(), tiny_train(6), spec(3)).unwrap();
    straight.run().unwrap();

    let mut first = Trainer::new(fresh(), tiny_train(6), spec(3)).unwrap();
    first.run_until(3).unwrap();
    crate::checkpoint::save_checkpoint(&path, &first).unwrap();
    let mut resumed = crate::checkpoint::load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(resumed.step(), 3);
    resumed.run().unwrap();

    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.optimizer, straight.optimizer);
    assert_eq!(resumed.history.to_log(), straight.history.to_log());
    assert_eq!(resumed.into_result().0, straight.into_result().0);
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("periodic.bin");
    let model = Model::<f32>::new(tiny_model(3, MetricMode::None, 8)).unwrap();
    let mut t = Trainer::new(model, TrainConfig { checkpoint_interval: 2, ..tiny_train(3) }, spec(3)).unwrap();
    t.checkpoint_path = Some(path.clone());
    t.run().unwrap();
    let back = crate::checkpoint::load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.step(), 2);
}

#[test]
fn early_stopping_triggers() {
    let model = Model::<f32>::new(tiny_model(3, MetricMode::None, 8)).unwrap();
    let config = TrainConfig {
        validation_interval: 1,
        patience: 1,
        learning_rate: 1e-6,
        ..tiny_train(50)
    };
    let (_, history) = train(model, config, spec(3)).unwrap();
    assert!(history.stopped_early);
    assert!(history.steps.len() < 50);
}

fn small_batch() -> (Model<f64>, MiniBatch, crate::loss::LossWeights) {
    let config = ModelConfig {
        k_max: 3,
        layers: 2,
        fc_units: 8,
        count_units: 4,
        seed: 2,
        ..ModelConfig::desk()
    };
    let model = Model::<f64>::new(config).unwrap();
    let batch = compose_minibatch(&spec(3), 2, 4, 77).unwrap();
    let w = class_balance_weights(4, 3, PriorModel::IndependentUniformNonEmpty).unwrap();
    (model, batch, w)
}

#[test]
fn gradient_check_passes_on_small_model() {
    let (model, batch, w) = small_batch();
    let report = gradient_check(&model, &batch, &w, 5.0, 1e-3, 8).unwrap();
    assert!(report.pass, "{report:?}");
    assert!(report.groups.iter().all(|g| g.checked > 0));
}

#[test]
fn gradient_check_passes_at_zero_parameters() {
    let (mut model, batch, w) = small_batch();
    model.params = model.params.zeros_like();
    let report = gradient_check(&model, &batch, &w, 5.0, 1e-3, 4).unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn gradient_check_detects_corruption() {
    let (model, batch, w) = small_batch();
    let (_, mut grad) = batch_gradient(&model, &batch, &w, 5.0).unwrap();
    grad.assignment.w.mapv_inplace(|v| v * 1.1);
    let report = gradient_check_against(&model, &batch, &w, 5.0, &grad, 1e-3, 8).unwrap();
    assert!(!report.pass);
    let bad = report.groups.iter().find(|g| g.name == "assignment.w").unwrap();
    assert!(bad.max_rel_error > 0.05);
}

#[test]
fn blob_loss_decreases() {
    let model = Model::<f32>::new(ModelConfig {
        k_max: 3,
        layers: 1,
        fc_units: 16,
        count_units: 8,
        ..ModelConfig::desk()
    })
    .unwrap();
    let config = TrainConfig {
        batch_sets: 8,
        set_size: 12,
        steps: 200,
        validation_interval: 0,
        ..TrainConfig::default()
    };
    let (_, history) = train(model, config, GeneratorSpec::new(vec![Family::GaussianBlobs], 3)).unwrap();
    let window = |from: usize| history.steps[from..from + 20].iter().map(|s| s.l_tot).sum::<f64>() / 20.0;
    assert!(window(180) < window(0), "{} vs {}", window(180), window(0));
}

#[test]
fn checkpoint_before_any_validation_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("early.bin");
    let model = Model::<f32>::new(tiny_model(3, MetricMode::None, 8)).unwrap();
    let mut t = Trainer::new(model, TrainConfig { validation_interval: 0, ..tiny_train(2) }, spec(3)).unwrap();
    t.run().unwrap();
    crate::checkpoint::save_checkpoint(&path, &t).unwrap();
    let back = crate::checkpoint::load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.early, t.early);
    assert_eq!(back.early.best_mr, None);
}
