use lqg_core::closed_loop::filter_consistency;
use lqg_core::dynamics::{noise_covariances, NoiseSpec, StateSpaceModel};
use lqg_core::estimation::{filter_trajectory, kf_predict, kf_update, steady_state_gain, Belief};
use lqg_core::regulation::QuadraticCost;
use lqg_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matched_model(db: f64) -> StateSpaceModel {
    let (w, v) = noise_covariances(NoiseSpec::equal(db), 2, 2);
    StateSpaceModel::double_integrator(w, v).unwrap()
}

#[test]
fn matched_filter_is_calibrated_and_white() {
    let model = matched_model(0.0);
    let cost = QuadraticCost::identity(2, 1, 100);
    let report = filter_consistency(&model, &cost, &Matrix::column(&[10.0, 0.0]), 3, 500).unwrap();
    let rel = (report.empirical_mse - report.mean_trace).abs() / report.mean_trace;
    assert!(rel < 0.05, "{report:?}");
    assert!(report.innovation_lag1 < 0.05, "{report:?}");
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Matrix {
    let a = random_matrix(rng, n, n);
    a.matmul(&a.transpose()).unwrap().add(&Matrix::identity(n).scale(shift)).unwrap()
}

#[test]
fn covariance_update_equals_joseph_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (m, n) in [(2, 2), (3, 2), (2, 1), (4, 3)] {
        for _ in 0..20 {
            let model = StateSpaceModel::new(
                random_matrix(&mut rng, m, m),
                Matrix::zeros(m, 1),
                random_matrix(&mut rng, n, m),
                random_spd(&mut rng, m, 0.1),
                random_spd(&mut rng, n, 0.1),
            )
            .unwrap();
            let pred = Belief::new(random_matrix(&mut rng, m, 1), random_spd(&mut rng, m, 0.01)).unwrap();
            let y_hat = model.h.matmul(&pred.mean).unwrap();
            let (post, rep) = kf_update(&model, &pred, &y_hat, &random_matrix(&mut rng, n, 1)).unwrap();

            let i_kh = Matrix::identity(m).sub(&rep.gain.matmul(&model.h).unwrap()).unwrap();
            let joseph = i_kh
                .matmul(&pred.covariance)
                .unwrap()
                .matmul(&i_kh.transpose())
                .unwrap()
                .add(&rep.gain.matmul(&model.v).unwrap().matmul(&rep.gain.transpose()).unwrap())
                .unwrap();
            let diff = post.covariance.max_abs_diff(&joseph);
            assert!(diff < 1e-8 * joseph.max_abs().max(1.0), "m={m} n={n}: {diff:e}");
        }
    }
}

#[test]
fn zero_innovation_keeps_prediction() {
    let model = matched_model(0.0);
    let pred = Belief::new(Matrix::column(&[3.0, -1.0]), Matrix::identity(2)).unwrap();
    let y_hat = model.h.matmul(&pred.mean).unwrap();
    let (post, _) = kf_update(&model, &pred, &y_hat, &y_hat).unwrap();
    assert_eq!(post.mean, pred.mean);
}

#[test]
fn empty_horizon_returns_prior() {
    let model = matched_model(0.0);
    let prior = Belief::known(Matrix::column(&[10.0, 0.0]));
    let out = filter_trajectory(&model, prior.clone(), &[], &[]).unwrap();
    assert_eq!(out.beliefs, vec![prior]);
    assert!(out.reports.is_empty());
}

#[test]
fn filter_trajectory_matches_manual_steps() {
    let model = matched_model(-5.0);
    let prior = Belief::known(Matrix::column(&[1.0, 0.5]));
    let controls: Vec<Matrix> = (0..5).map(|t| Matrix::scalar(0.1 * t as f64)).collect();
    let obs: Vec<Matrix> = (0..5).map(|t| Matrix::column(&[t as f64, 1.0])).collect();
    let out = filter_trajectory(&model, prior.clone(), &controls, &obs).unwrap();
    let mut b = prior;
    for t in 0..5 {
        let (pred, y_hat) = kf_predict(&model, &b, &controls[t]).unwrap();
        let (post, _) = kf_update(&model, &pred, &y_hat, &obs[t]).unwrap();
        assert_eq!(post, out.beliefs[t + 1]);
        b = post;
    }
    assert!(filter_trajectory(&model, b, &controls, &obs[..4]).is_err());
}

#[test]
fn scalar_steady_state_gain_matches_closed_form() {
    for (q, r) in [(1.0, 1.0), (0.1, 2.0), (5.0, 0.3)] {
        let model = StateSpaceModel::new(
            Matrix::scalar(1.0),
            Matrix::zeros(1, 1),
            Matrix::scalar(1.0),
            Matrix::scalar(q),
            Matrix::scalar(r),
        )
        .unwrap();
        // predicted variance solves p² - q p - q r = 0
        let p = (q + (q * q + 4.0 * q * r).sqrt()) / 2.0;
        let gain = steady_state_gain(&model, 1e-14, 10_000).unwrap().item();
        assert!((gain - p / (p + r)).abs() < 1e-12, "q {q}, r {r}: {gain}");
    }
}

#[test]
fn gain_recursion_reports_iteration_cap() {
    assert!(steady_state_gain(&matched_model(0.0), 1e-12, 1).is_err());
    assert!(steady_state_gain(&matched_model(0.0), 1e-12, 1000).is_ok());
}
