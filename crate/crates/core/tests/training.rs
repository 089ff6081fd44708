use lqg_core::closed_loop::{rollout, Controller, KalmanGain};
use lqg_core::dynamics::{apply_mismatch, MismatchSpec, noise_covariances, NoiseSpec, Simulator, StateSpaceModel};
use lqg_core::estimation::Belief;
use lqg_core::gain_net::{GainNetConfig, GainNetParams};
use lqg_core::regulation::QuadraticCost;
use lqg_core::training::{
    grad_check, initial_params, train, BaseGain, Optimizer, RandomInitFactory, TrainConfig,
};
use lqg_core::{Error, Matrix};

fn matched(db: f64) -> StateSpaceModel {
    let (w, v) = noise_covariances(NoiseSpec::equal(db), 2, 2);
    StateSpaceModel::double_integrator(w, v).unwrap()
}

fn x0() -> Matrix {
    Matrix::column(&[10.0, 0.0])
}

fn factory(truth: StateSpaceModel, seed: u64) -> RandomInitFactory {
    RandomInitFactory {
        truth,
        x0_mean: x0(),
        x0_std: 1.0,
        seed,
    }
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::for_dims(2, 2);
    cfg.net = GainNetConfig { embed: 8, hidden: 6 };
    cfg.iterations = 5;
    cfg.batch_size = 4;
    cfg.learning_rate = 3e-3;
    cfg.seed = 13;
    cfg
}

#[test]
fn zero_iterations_leave_parameters_unchanged() {
    let model = matched(0.0);
    let mut cfg = small_config();
    cfg.iterations = 0;
    let report = train(&model, &factory(model.clone(), 1), &QuadraticCost::identity(2, 1, 10), &cfg).unwrap();
    assert_eq!(report.params, initial_params(&model, &cfg).unwrap());
    assert!(report.losses.is_empty());
}

#[test]
fn fixed_seed_training_is_deterministic() {
    let model = matched(0.0);
    let cost = QuadraticCost::identity(2, 1, 20);
    let cfg = small_config();
    let a = train(&model, &factory(model.clone(), 4), &cost, &cfg).unwrap();
    let b = train(&model, &factory(model.clone(), 4), &cost, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.losses.len(), cfg.iterations);
    assert_eq!(a.grad_norms.len(), cfg.iterations);
    assert_ne!(a.params, initial_params(&model, &cfg).unwrap());
}

#[test]
fn regularizer_alone_contracts_geometrically() {
    let model = matched(0.0);
    let cost = QuadraticCost::identity(2, 1, 0);
    let mut cfg = small_config();
    cfg.optimizer = Optimizer::Gradient;
    cfg.regularization = 0.05;
    cfg.learning_rate = 0.1;
    let factor = 1.0 - 2.0 * cfg.learning_rate * cfg.regularization;
    let init = initial_params(&model, &cfg).unwrap().norm_squared().sqrt();
    for steps in [1, 4, 10] {
        cfg.iterations = steps;
        let report = train(&model, &factory(model.clone(), 0), &cost, &cfg).unwrap();
        let norm = report.params.norm_squared().sqrt();
        let expected = init * factor.powi(steps as i32);
        assert!((norm - expected).abs() < 1e-12 * init, "{steps} steps: {norm} vs {expected}");
    }
}

fn check_setup() -> (StateSpaceModel, Simulator, QuadraticCost, GainNetParams) {
    let model = matched(0.0);
    let sim = Simulator::with_random_initial(model.clone(), &x0(), 1.0, 99, 0).unwrap();
    let cost = QuadraticCost::identity(2, 1, 20);
    let mut cfg = TrainConfig::for_dims(2, 2);
    cfg.seed = 3;
    cfg.zero_head = false;
    let params = initial_params(&model, &cfg).unwrap();
    (model, sim, cost, params)
}

#[test]
fn full_loop_gradient_matches_finite_differences() {
    let (model, sim, cost, params) = check_setup();
    let err = grad_check(&model, &sim, &x0(), &cost, &params, 1e-4, 8, 1e-6).unwrap();
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn oversized_step_degrades_the_check() {
    let (model, sim, cost, params) = check_setup();
    let fine = grad_check(&model, &sim, &x0(), &cost, &params, 1e-4, 8, 1e-6).unwrap();
    let coarse = grad_check(&model, &sim, &x0(), &cost, &params, 1e-4, 8, 1e-1).unwrap();
    assert!(coarse > 10.0 * fine, "coarse {coarse:e}, fine {fine:e}");
}

#[test]
fn base_gain_choices() {
    let model = matched(0.0);
    let mut cfg = small_config();
    cfg.base_gain = BaseGain::Zero;
    assert_eq!(initial_params(&model, &cfg).unwrap().base_gain().max_abs(), 0.0);
    cfg.base_gain = BaseGain::ObservationInverse;
    assert_eq!(initial_params(&model, &cfg).unwrap().base_gain(), &Matrix::identity(2));
    cfg.base_gain = BaseGain::SteadyState;
    let steady = initial_params(&model, &cfg).unwrap();
    let mut kalman = KalmanGain::new(&model, Matrix::zeros(2, 2));
    let mut late = kalman.next_gain().unwrap();
    for _ in 0..200 {
        late = kalman.next_gain().unwrap();
    }
    assert!(steady.base_gain().sub(&late).unwrap().max_abs() < 1e-10);
}

#[test]
fn zero_head_starts_at_the_base_gain() {
    let model = matched(0.0);
    let mut cfg = small_config();
    let zeroed = initial_params(&model, &cfg).unwrap();
    cfg.zero_head = false;
    let random = initial_params(&model, &cfg).unwrap();
    let (z, r) = (zeroed.flatten(), random.flatten());
    let head = 4 * cfg.net.hidden + 4;
    assert!(z[z.len() - head..].iter().all(|&v| v == 0.0));
    assert_eq!(z[..z.len() - head], r[..r.len() - head]);
    assert!(r[r.len() - head..].iter().any(|&v| v != 0.0));

    let x = x0();
    let cost = QuadraticCost::identity(2, 1, 30);
    let learned = Controller::learned(model.clone(), &cost, Belief::known(x.clone()), zeroed.clone()).unwrap();
    let mut sim = Simulator::new(model.clone(), x, 1, 0).unwrap();
    let traj = rollout(&learned, &mut sim, &cost).unwrap();
    for gain in &traj.gains {
        assert_eq!(gain, zeroed.base_gain());
    }
}

#[test]
fn divergent_training_reports_iteration() {
    let model = matched(0.0);
    let cost = QuadraticCost::identity(2, 1, 30);
    let mut cfg = small_config();
    cfg.optimizer = Optimizer::Gradient;
    cfg.learning_rate = 1e6;
    match train(&model, &factory(model.clone(), 2), &cost, &cfg) {
        Err(Error::NonFinite { iteration, .. }) => assert!(iteration >= 1),
        other => panic!("expected a non-finite abort, got {:?}", other.map(|r| r.losses)),
    }
}

#[test]
fn default_configuration_loss_trends_down_under_mismatch() {
    let model = matched(0.0);
    let truth = apply_mismatch(&model, MismatchSpec::evolution(20.0)).unwrap();
    let cost = QuadraticCost::identity(2, 1, 100);
    let mut cfg = TrainConfig::for_dims(2, 2);
    cfg.iterations = 60;
    let report = train(&model, &factory(truth, 8), &cost, &cfg).unwrap();
    let window = 20;
    let tail = &report.losses[report.losses.len() - window..];
    let smoothed = tail.iter().sum::<f64>() / window as f64;
    assert!(smoothed < report.losses[0], "smoothed {smoothed} vs first {}", report.losses[0]);
}
