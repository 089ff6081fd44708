//! End-to-end training of the gain network on the regularised closed-loop
//! cost, with pathwise gradients through simulated rollouts.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::closed_loop::{rollout_with, NetworkGain};
use crate::dynamics::{Simulator, StateSpaceModel};
use crate::error::{Error, Result};
use crate::estimation::steady_state_gain;
use crate::gain_net::{observation_inverse, GainNetConfig, GainNetParams, ParamVars};
use crate::regulation::{riccati_backward, GainSchedule, QuadraticCost};
use crate::tensor::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// `Θ ← Θ - μ ∇`
    Gradient,
    /// Adaptive moment estimation with the usual `(0.9, 0.999, 1e-8)`.
    Adam,
}

const STEADY_STATE_TOL: f64 = 1e-12;
const STEADY_STATE_MAX_ITER: usize = 100_000;

/// Fixed gain the network output is added to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseGain {
    Zero,
    /// Pseudo-inverse of the design observation matrix.
    ObservationInverse,
    /// Converged Kalman gain of the design model.
    SteadyState,
}

impl BaseGain {
    pub fn matrix(self, design: &StateSpaceModel) -> Result<Matrix> {
        match self {
            BaseGain::Zero => Ok(Matrix::zeros(design.state_dim(), design.obs_dim())),
            BaseGain::ObservationInverse => observation_inverse(&design.h),
            BaseGain::SteadyState => steady_state_gain(design, STEADY_STATE_TOL, STEADY_STATE_MAX_ITER),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub regularization: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Rescale the gradient to this norm when it is exceeded.
    pub grad_clip: Option<f64>,
    pub net: GainNetConfig,
    pub base_gain: BaseGain,
    /// Start the output head at zero so the initial gain equals the base.
    pub zero_head: bool,
}

impl TrainConfig {
    pub fn for_dims(m: usize, n: usize) -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            iterations: 200,
            batch_size: 32,
            regularization: 1e-4,
            optimizer: Optimizer::Adam,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: None,
            net: GainNetConfig::for_dims(m, n),
            base_gain: BaseGain::SteadyState,
            zero_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Domain("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be at least 1".into()));
        }
        if !(self.regularization >= 0.0) {
            return Err(Error::Domain("regularization must be non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Domain("gradient clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Produces a fresh simulator for each training trajectory.
pub trait SimulatorFactory: Sync {
    fn make(&self, stream: u64) -> Result<Simulator>;
    /// Mean initial state, used as the estimator's prior mean.
    fn initial_mean(&self) -> &Matrix;
}

/// Simulators of a fixed truth model with `x0 ~ N(mean, std² I)`.
#[derive(Debug, Clone)]
pub struct RandomInitFactory {
    pub truth: StateSpaceModel,
    pub x0_mean: Matrix,
    pub x0_std: f64,
    pub seed: u64,
}

impl SimulatorFactory for RandomInitFactory {
    fn make(&self, stream: u64) -> Result<Simulator> {
        Simulator::with_random_initial(self.truth.clone(), &self.x0_mean, self.x0_std, self.seed, stream)
    }

    fn initial_mean(&self) -> &Matrix {
        &self.x0_mean
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Regularised batch loss at each executed iteration (before its update).
    pub losses: Vec<f64>,
    pub losses_db: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub params: GainNetParams,
    pub wall_time: Duration,
}

/// `mean(J_b) + γ ‖Θ‖²` on a single tape.
pub fn regularized_loss<'t>(losses: &[Var<'t>], params: &ParamVars<'t>, gamma: f64) -> Result<Var<'t>> {
    let first = losses
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let mut total = *first;
    for l in &losses[1..] {
        total = total.add(*l)?;
    }
    let mean = total.scale(1.0 / losses.len() as f64);
    if gamma == 0.0 {
        return Ok(mean);
    }
    mean.add(params.norm_squared()?.scale(gamma))
}

/// Closed-loop cost of one trajectory and its gradient with respect to the
/// flattened weights.
pub fn trajectory_loss_and_grad(
    params: &GainNetParams,
    design: &StateSpaceModel,
    schedule: &GainSchedule,
    prior_mean: &Matrix,
    sim: &mut Simulator,
    cost: &QuadraticCost,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let vars = params.attach(&tape);
    let mut source = NetworkGain::new(&tape, vars.clone(), params);
    let r = rollout_with(&tape, design, schedule, prior_mean, &mut source, sim, cost)?;
    let grads = tape.backward(r.loss, vars.leaves())?;
    let mut flat = Vec::with_capacity(params.len());
    for leaf in vars.leaves() {
        flat.extend_from_slice(grads.get(*leaf).expect("requested leaf").as_slice());
    }
    Ok((r.loss.value().item(), flat))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Initial weights for `cfg`: seeded by `cfg.seed`, with the configured
/// base gain and head initialisation.
pub fn initial_params(design: &StateSpaceModel, cfg: &TrainConfig) -> Result<GainNetParams> {
    let params = GainNetParams::init(design.state_dim(), design.obs_dim(), cfg.net, cfg.seed)?
        .with_base_gain(cfg.base_gain.matrix(design)?)?;
    Ok(if cfg.zero_head { params.with_zero_head() } else { params })
}

/// Train from [`initial_params`].
pub fn train(
    design: &StateSpaceModel,
    factory: &dyn SimulatorFactory,
    cost: &QuadraticCost,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let init = initial_params(design, cfg)?;
    train_from(design, factory, cost, cfg, init, &mut |_, _| Ok(()))
}

/// Train starting at `init`; `on_checkpoint(iteration, params)` runs every
/// `cfg.checkpoint_every` iterations.
pub fn train_from(
    design: &StateSpaceModel,
    factory: &dyn SimulatorFactory,
    cost: &QuadraticCost,
    cfg: &TrainConfig,
    init: GainNetParams,
    on_checkpoint: &mut dyn FnMut(usize, &GainNetParams) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let schedule = riccati_backward(design, cost)?;
    let prior_mean = factory.initial_mean().clone();
    let mut params = init;
    let mut theta = params.flatten();
    let mut adam = Adam::new(theta.len());
    let batch = cfg.batch_size;

    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut losses_db = Vec::with_capacity(cfg.iterations);
    let mut grad_norms = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let results: Vec<Result<(f64, Vec<f64>)>> = (0..batch)
            .into_par_iter()
            .map(|j| {
                let mut sim = factory.make((it * batch + j) as u64)?;
                trajectory_loss_and_grad(&params, design, &schedule, &prior_mean, &mut sim, cost)
            })
            .collect();

        // fixed-order reduction keeps the result independent of scheduling
        let mut loss = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for r in results {
            let (l, g) = r.map_err(|e| match e {
                Error::Singular { .. } | Error::Domain(_) => Error::NonFinite {
                    what: "rollout",
                    iteration: it,
                },
                other => other,
            })?;
            loss += l;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi;
            }
        }
        let inv = 1.0 / batch as f64;
        loss *= inv;
        let gamma = cfg.regularization;
        loss += gamma * theta.iter().map(|v| v * v).sum::<f64>();
        for (g, t) in grad.iter_mut().zip(&theta) {
            *g = *g * inv + 2.0 * gamma * t;
        }

        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                iteration: it,
            });
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                iteration: it,
            });
        }
        losses.push(loss);
        losses_db.push(10.0 * loss.log10());
        grad_norms.push(norm);

        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                let s = clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        match cfg.optimizer {
            Optimizer::Gradient => {
                for (t, g) in theta.iter_mut().zip(&grad) {
                    *t -= cfg.learning_rate * g;
                }
            }
            Optimizer::Adam => adam.step(&mut theta, &grad, cfg.learning_rate),
        }
        params.assign_flat(&theta)?;

        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(it + 1, &params)?;
        }
    }

    Ok(TrainReport {
        losses,
        losses_db,
        grad_norms,
        params,
        wall_time: start.elapsed(),
    })
}

/// Maximum relative error between `grad · d` and the central difference
/// `(f(θ + εd) - f(θ - εd)) / 2ε` over `directions` random unit vectors.
pub fn directional_grad_check(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    theta: &[f64],
    grad: &[f64],
    directions: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let mut d: Vec<f64> = (0..theta.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= norm);

        let shifted = |sign: f64| -> Vec<f64> {
            theta.iter().zip(&d).map(|(t, di)| t + sign * eps * di).collect()
        };
        let fd = (f(&shifted(1.0))? - f(&shifted(-1.0))?) / (2.0 * eps);
        let analytic: f64 = grad.iter().zip(&d).map(|(g, di)| g * di).sum();
        let scale = fd.abs().max(analytic.abs()).max(1e-12);
        worst = worst.max((fd - analytic).abs() / scale);
    }
    Ok(worst)
}

/// Directional gradient check of the regularised closed-loop cost on a
/// single fixed-seed trajectory.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    design: &StateSpaceModel,
    sim: &Simulator,
    prior_mean: &Matrix,
    cost: &QuadraticCost,
    params: &GainNetParams,
    gamma: f64,
    directions: usize,
    eps: f64,
) -> Result<f64> {
    let schedule = riccati_backward(design, cost)?;
    let eval = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut p = params.clone();
        p.assign_flat(theta)?;
        let mut s = sim.clone();
        let (l, mut g) = trajectory_loss_and_grad(&p, design, &schedule, prior_mean, &mut s, cost)?;
        let reg: f64 = theta.iter().map(|v| v * v).sum();
        for (gi, t) in g.iter_mut().zip(theta) {
            *gi += 2.0 * gamma * t;
        }
        Ok((l + gamma * reg, g))
    };
    let theta = params.flatten();
    let (_, grad) = eval(&theta)?;
    directional_grad_check(&|t| eval(t).map(|(l, _)| l), &theta, &grad, directions, eps, params.seed() ^ 0x5eed)
}
