use lqg_core::closed_loop::{
    lqg_loss, monte_carlo, rollout, rollout_with, Controller, GainContext, GainSource, KalmanGain,
    NetworkGain,
};
use lqg_core::dynamics::{noise_covariances, NoiseSpec, Simulator, StateSpaceModel};
use lqg_core::estimation::{kalman_gain, Belief, KNOWN_PRIOR_VARIANCE};
use lqg_core::gain_net::{build_features, gain_step, GainNetConfig, GainNetParams, GainNetState};
use lqg_core::regulation::{riccati_backward, QuadraticCost};
use lqg_core::{Matrix, Result, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matched(db: f64) -> StateSpaceModel {
    let (w, v) = noise_covariances(NoiseSpec::equal(db), 2, 2);
    StateSpaceModel::double_integrator(w, v).unwrap()
}

fn x0() -> Matrix {
    Matrix::column(&[10.0, 0.0])
}

/// Expected cost of the separation controller from the Riccati and filter
/// recursions:
/// `μ'P_0μ + tr(P_0 Σ_0) + Σ tr(W P_{t+1}) + Σ tr(Σ_t L_t'(R + G'P_{t+1}G) L_t)`.
fn analytic_cost(model: &StateSpaceModel, cost: &QuadraticCost, mean: &Matrix, prior: &Matrix) -> f64 {
    let sched = riccati_backward(model, cost).unwrap();
    let p = &sched.riccati;
    let mut total = p[0].quad_form(mean).unwrap() + p[0].matmul(prior).unwrap().trace();
    let mut sigma = prior.clone();
    for t in 0..cost.horizon {
        let l = &sched.gains[t];
        let bracket = cost
            .r_control
            .add(&model.g.transpose().matmul(&p[t + 1]).unwrap().matmul(&model.g).unwrap())
            .unwrap();
        total += sigma.matmul(&l.transpose().matmul(&bracket).unwrap().matmul(l).unwrap()).unwrap().trace();
        total += model.w.matmul(&p[t + 1]).unwrap().trace();
        // plain covariance recursion, independent of the estimation module
        let pred = model.f.matmul(&sigma).unwrap().matmul(&model.f.transpose()).unwrap().add(&model.w).unwrap();
        let s = pred.add(&model.v).unwrap();
        let k = pred.matmul(&inverse_2x2(&s)).unwrap();
        sigma = Matrix::identity(2).sub(&k).unwrap().matmul(&pred).unwrap();
    }
    total
}

fn inverse_2x2(a: &Matrix) -> Matrix {
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    Matrix::from_rows(&[[a[(1, 1)] / det, -a[(0, 1)] / det], [-a[(1, 0)] / det, a[(0, 0)] / det]]).unwrap()
}

#[test]
fn model_based_cost_matches_analytic_optimum() {
    let model = matched(0.0);
    let cost = QuadraticCost::identity(2, 1, 100);
    let prior = Belief::known(x0());
    let ctrl = Controller::model_based(model.clone(), &cost, prior.clone()).unwrap();
    let runs = monte_carlo(&ctrl, &model, &cost, &x0(), 11, 1000).unwrap();
    let mean = runs.iter().map(|r| r.loss).sum::<f64>() / runs.len() as f64;
    let expected = analytic_cost(&model, &cost, &x0(), &prior.covariance);
    assert!((mean - expected).abs() / expected < 0.03, "empirical {mean} vs analytic {expected}");
    assert!(runs.iter().all(|r| r.loss >= 0.0));
}

#[test]
fn matched_model_based_loop_stays_bounded() {
    let model = matched(0.0);
    let cost = QuadraticCost::identity(2, 1, 100);
    let ctrl = Controller::model_based(model.clone(), &cost, Belief::known(x0())).unwrap();
    let worst = (0..1000u64)
        .map(|stream| {
            let mut sim = Simulator::new(model.clone(), x0(), 5, stream).unwrap();
            let traj = rollout(&ctrl, &mut sim, &cost).unwrap();
            traj.states.iter().map(Matrix::norm).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    assert!(worst < 50.0, "largest state norm {worst}");
}

/// Runs the network alongside the Kalman recursion but applies the Kalman
/// gain.
struct ForcedKalman<'t, 'm> {
    net: NetworkGain<'t>,
    kalman: KalmanGain<'m>,
}

impl<'t> GainSource<'t> for ForcedKalman<'t, '_> {
    fn gain(&mut self, tape: &'t Tape, ctx: &GainContext<'t>) -> Result<Var<'t>> {
        self.net.gain(tape, ctx)?;
        self.kalman.gain(tape, ctx)
    }

    fn after_update(&mut self, posterior: Var<'t>, ctx: &GainContext<'t>) {
        self.net.after_update(posterior, ctx);
    }

    fn covariance(&self) -> Option<&Matrix> {
        self.kalman.covariance()
    }
}

#[test]
fn forced_kalman_gain_reproduces_model_based_rollout() {
    let model = matched(0.0);
    let cost = QuadraticCost::identity(2, 1, 60);
    let prior = Belief::known(x0());
    let ctrl = Controller::model_based(model.clone(), &cost, prior.clone()).unwrap();
    let mut sim = Simulator::new(model.clone(), x0(), 21, 4).unwrap();
    let reference = rollout(&ctrl, &mut sim, &cost).unwrap();

    let params = GainNetParams::init(2, 2, GainNetConfig { embed: 8, hidden: 6 }, 3).unwrap();
    let tape = Tape::new();
    let vars = params.attach(&tape);
    let mut source = ForcedKalman {
        net: NetworkGain::new(&tape, vars, &params),
        kalman: KalmanGain::new(&model, prior.covariance.clone()),
    };
    let mut sim = Simulator::new(model.clone(), x0(), 21, 4).unwrap();
    let forced = rollout_with(&tape, &model, &ctrl.schedule, &prior.mean, &mut source, &mut sim, &cost).unwrap();
    assert_eq!(forced.trajectory, reference);
    assert_eq!(forced.loss.value().item().to_bits(), lqg_loss(&reference, &cost).unwrap().to_bits());
}

#[test]
fn kalman_source_matches_closed_form_gain() {
    let model = matched(-5.0);
    let mut source = KalmanGain::new(&model, Matrix::identity(2));
    let pred = model.f.matmul(&model.f.transpose()).unwrap().add(&model.w).unwrap();
    let (_, k) = kalman_gain(&model, &pred.symmetrize().unwrap()).unwrap();
    assert_eq!(source.next_gain().unwrap(), k);
}

type Step = (Matrix, Matrix, Matrix);

/// Gains produced by feeding the network a fixed sequence of
/// `(y, ŷ, x̂_prior)` triples.
fn network_gains(params: &GainNetParams, steps: &[Step]) -> Vec<Matrix> {
    let tape = Tape::new();
    let vars = params.attach(&tape);
    let mut state = GainNetState::for_params(&tape, params);
    run_steps(&tape, &vars, &mut state, steps)
}

fn run_steps<'t>(
    tape: &'t Tape,
    vars: &lqg_core::gain_net::ParamVars<'t>,
    state: &mut GainNetState<'t>,
    steps: &[Step],
) -> Vec<Matrix> {
    steps
        .iter()
        .map(|(y, y_hat, x_pred)| {
            let (y, y_hat, x_pred) = (tape.constant(y.clone()), tape.constant(y_hat.clone()), tape.constant(x_pred.clone()));
            let features = build_features(y, state, y_hat).unwrap();
            let k = gain_step(vars, state, features).unwrap();
            let post = x_pred.add(k.matmul(y.sub(y_hat).unwrap()).unwrap()).unwrap();
            state.advance(post, x_pred, y);
            k.value()
        })
        .collect()
}

fn random_steps(seed: u64, len: usize) -> Vec<Step> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut col = |scale: f64| Matrix::column(&[rng.random_range(-scale..scale), rng.random_range(-scale..scale)]);
    (0..len).map(|_| (col(5.0), col(5.0), col(5.0))).collect()
}

#[test]
fn gain_depends_only_on_past_features() {
    let params = GainNetParams::init(2, 2, GainNetConfig { embed: 8, hidden: 6 }, 12).unwrap();
    let base = random_steps(1, 30);
    let reference = network_gains(&params, &base);
    for cut in [0, 7, 29] {
        let mut perturbed = base.clone();
        let tail = random_steps(2 + cut as u64, 30);
        perturbed[cut + 1..].clone_from_slice(&tail[cut + 1..]);
        let gains = network_gains(&params, &perturbed);
        assert_eq!(gains[..=cut], reference[..=cut], "cut at {cut}");
        if cut + 1 < 30 {
            assert_ne!(gains[cut + 1..], reference[cut + 1..]);
        }
    }
}

#[test]
fn reset_between_trajectories_matches_isolation() {
    let params = GainNetParams::init(2, 2, GainNetConfig { embed: 8, hidden: 6 }, 5).unwrap();
    let first = random_steps(10, 20);
    let second = random_steps(11, 20);
    let alone = network_gains(&params, &second);

    let tape = Tape::new();
    let vars = params.attach(&tape);
    let mut state = GainNetState::for_params(&tape, &params);
    run_steps(&tape, &vars, &mut state, &first);
    let mut state = GainNetState::for_params(&tape, &params);
    let back_to_back = run_steps(&tape, &vars, &mut state, &second);
    assert_eq!(back_to_back, alone);
}

#[test]
fn noiseless_zero_weight_network_matches_model_based() {
    // noiseless truth; the design keeps V > 0 so the filter stays defined
    let truth = StateSpaceModel::double_integrator(Matrix::zeros(2, 2), Matrix::zeros(2, 2)).unwrap();
    let design = truth.with_noise(Matrix::zeros(2, 2), Matrix::identity(2).scale(1e-9)).unwrap();
    let cost = QuadraticCost::identity(2, 1, 40);
    let prior = Belief::known(x0());
    let mb = Controller::model_based(design.clone(), &cost, prior.clone()).unwrap();
    let zero = GainNetParams::zeros(2, 2, GainNetConfig::for_dims(2, 2)).unwrap();
    let learned = Controller::learned(design, &cost, prior, zero).unwrap();
    let mut sim = Simulator::new(truth.clone(), x0(), 1, 0).unwrap();
    let a = rollout(&mb, &mut sim, &cost).unwrap();
    let mut sim = Simulator::new(truth, x0(), 1, 0).unwrap();
    let b = rollout(&learned, &mut sim, &cost).unwrap();
    for t in 0..cost.horizon {
        assert!(a.controls[t].max_abs_diff(&b.controls[t]) < 1e-12, "t = {t}");
    }
    assert!(b.gains.iter().all(|k| k.max_abs() == 0.0));
}

#[test]
fn singular_innovation_covariance_is_reported() {
    let model = StateSpaceModel::double_integrator(Matrix::zeros(2, 2), Matrix::zeros(2, 2)).unwrap();
    let cost = QuadraticCost::identity(2, 1, 5);
    let prior = Belief::new(x0(), Matrix::identity(2).scale(KNOWN_PRIOR_VARIANCE)).unwrap();
    let ctrl = Controller::model_based(model.clone(), &cost, prior).unwrap();
    let mut sim = Simulator::new(model, x0(), 1, 0).unwrap();
    assert!(matches!(rollout(&ctrl, &mut sim, &cost), Err(lqg_core::Error::Singular { .. })));
}

#[test]
fn trajectory_lengths_follow_horizon() {
    let model = matched(0.0);
    let cost = QuadraticCost::identity(2, 1, 12);
    let ctrl = Controller::model_based(model.clone(), &cost, Belief::known(x0())).unwrap();
    let mut sim = Simulator::new(model, x0(), 0, 0).unwrap();
    let traj = rollout(&ctrl, &mut sim, &cost).unwrap();
    assert_eq!(traj.states.len(), 13);
    assert_eq!(traj.estimates.len(), 13);
    assert_eq!(traj.observations.len(), 12);
    assert_eq!(traj.controls.len(), 12);
    assert_eq!(traj.gains.len(), 12);
    assert_eq!(traj.states[0], x0());
}
