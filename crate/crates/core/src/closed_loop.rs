//! Separation-principle controller in closed loop with a simulator.
//!
//! Each step runs control → dynamics → observation → estimate:
//!
//! 1. `u_t = u* - L_t (x̂_t - x*)` from the LQR schedule,
//! 2. the simulator advances to `x_{t+1}` and emits `y_{t+1}`,
//! 3. the design model predicts `x̂_{t+1|t} = F x̂_t + G u_t`,
//! 4. the estimate is corrected with a gain `K_{t+1}` from either the Kalman
//!    recursion or the gain network.
//!
//! The loop is recorded on a [`Tape`], so the quadratic cost of a learned
//! rollout can be differentiated with respect to the network weights. Noise
//! draws enter the tape as constants.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::dynamics::{Simulator, StateSpaceModel};
use crate::error::{Error, Result};
use crate::estimation::{kalman_gain, Belief};
use crate::gain_net::{build_features, gain_step, GainNetParams, GainNetState, ParamVars};
use crate::regulation::{riccati_backward, GainSchedule, QuadraticCost};
use crate::tensor::{Matrix, Tape, Var};

/// Where the estimator's gain comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ControllerKind {
    /// Closed-form Kalman gain from the design model's noise covariances.
    ModelBased,
    /// Gain produced by the recurrent network.
    Learned(GainNetParams),
}

/// Estimator plus LQR schedule, both built from the design model.
#[derive(Debug, Clone)]
pub struct Controller {
    pub kind: ControllerKind,
    pub design: StateSpaceModel,
    pub schedule: GainSchedule,
    pub prior: Belief,
}

impl Controller {
    pub fn model_based(design: StateSpaceModel, cost: &QuadraticCost, prior: Belief) -> Result<Self> {
        Self::new(ControllerKind::ModelBased, design, cost, prior)
    }

    pub fn learned(
        design: StateSpaceModel,
        cost: &QuadraticCost,
        prior: Belief,
        params: GainNetParams,
    ) -> Result<Self> {
        if params.state_dim() != design.state_dim() || params.obs_dim() != design.obs_dim() {
            return Err(Error::Dimension {
                op: "learned controller",
                lhs: (params.state_dim(), params.obs_dim()),
                rhs: (design.state_dim(), design.obs_dim()),
            });
        }
        Self::new(ControllerKind::Learned(params), design, cost, prior)
    }

    fn new(kind: ControllerKind, design: StateSpaceModel, cost: &QuadraticCost, prior: Belief) -> Result<Self> {
        if prior.mean.rows() != design.state_dim() {
            return Err(Error::Dimension {
                op: "controller prior",
                lhs: prior.mean.shape(),
                rhs: (design.state_dim(), 1),
            });
        }
        let schedule = riccati_backward(&design, cost)?;
        Ok(Controller {
            kind,
            design,
            schedule,
            prior,
        })
    }

    pub fn params(&self) -> Option<&GainNetParams> {
        match &self.kind {
            ControllerKind::Learned(p) => Some(p),
            ControllerKind::ModelBased => None,
        }
    }
}

/// Values available when the gain for step `t` is requested.
#[derive(Debug, Clone, Copy)]
pub struct GainContext<'t> {
    pub step: usize,
    pub observation: Var<'t>,
    pub predicted_observation: Var<'t>,
    pub predicted_state: Var<'t>,
}

/// Source of the per-step estimator gain.
pub trait GainSource<'t> {
    fn gain(&mut self, tape: &'t Tape, ctx: &GainContext<'t>) -> Result<Var<'t>>;

    /// Called once the posterior estimate of the step is known.
    fn after_update(&mut self, _posterior: Var<'t>, _ctx: &GainContext<'t>) {}

    /// Posterior covariance, when the source tracks one.
    fn covariance(&self) -> Option<&Matrix> {
        None
    }
}

/// Kalman recursion over the design model.
#[derive(Debug, Clone)]
pub struct KalmanGain<'m> {
    design: &'m StateSpaceModel,
    covariance: Matrix,
}

impl<'m> KalmanGain<'m> {
    pub fn new(design: &'m StateSpaceModel, prior_covariance: Matrix) -> Self {
        KalmanGain {
            design,
            covariance: prior_covariance,
        }
    }

    /// Gain for the next step as a plain matrix; advances the covariance.
    pub fn next_gain(&mut self) -> Result<Matrix> {
        let f = &self.design.f;
        let predicted = f
            .matmul(&self.covariance)?
            .matmul(&f.transpose())?
            .add(&self.design.w)?
            .symmetrize()?;
        let (s, k) = kalman_gain(self.design, &predicted)?;
        self.covariance = predicted
            .sub(&k.matmul(&s)?.matmul(&k.transpose())?)?
            .symmetrize()?;
        Ok(k)
    }
}

impl<'t> GainSource<'t> for KalmanGain<'_> {
    fn gain(&mut self, tape: &'t Tape, _ctx: &GainContext<'t>) -> Result<Var<'t>> {
        Ok(tape.constant(self.next_gain()?))
    }

    fn covariance(&self) -> Option<&Matrix> {
        Some(&self.covariance)
    }
}

/// Recurrent gain network with its per-trajectory state.
#[derive(Debug, Clone)]
pub struct NetworkGain<'t> {
    params: ParamVars<'t>,
    state: GainNetState<'t>,
}

impl<'t> NetworkGain<'t> {
    pub fn new(tape: &'t Tape, params: ParamVars<'t>, template: &GainNetParams) -> Self {
        NetworkGain {
            params,
            state: GainNetState::for_params(tape, template),
        }
    }

    pub fn state(&self) -> &GainNetState<'t> {
        &self.state
    }
}

impl<'t> GainSource<'t> for NetworkGain<'t> {
    fn gain(&mut self, _tape: &'t Tape, ctx: &GainContext<'t>) -> Result<Var<'t>> {
        let features = build_features(ctx.observation, &mut self.state, ctx.predicted_observation)?;
        gain_step(&self.params, &mut self.state, features)
    }

    fn after_update(&mut self, posterior: Var<'t>, ctx: &GainContext<'t>) {
        self.state
            .advance(posterior, ctx.predicted_state, ctx.observation);
    }
}

/// Time-indexed record of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x_0 .. x_T`
    pub states: Vec<Matrix>,
    /// `y_1 .. y_T`
    pub observations: Vec<Matrix>,
    /// `u_0 .. u_{T-1}`
    pub controls: Vec<Matrix>,
    /// `x̂_0 .. x̂_T`; `x̂_0` is the prior mean.
    pub estimates: Vec<Matrix>,
    /// `K_1 .. K_T`
    pub gains: Vec<Matrix>,
    /// `Σ_0 .. Σ_T` when the estimator tracks a covariance.
    pub covariances: Option<Vec<Matrix>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Innovations `y_t - H x̂_{t|t-1}` are not stored; this recomputes
    /// them from the design model.
    pub fn innovations(&self, design: &StateSpaceModel) -> Result<Vec<Matrix>> {
        (0..self.horizon())
            .map(|t| {
                let pred = design
                    .f
                    .matmul(&self.estimates[t])?
                    .add(&design.g.matmul(&self.controls[t])?)?;
                self.observations[t].sub(&design.h.matmul(&pred)?)
            })
            .collect()
    }
}

/// A rollout recorded on a tape.
pub struct TracedRollout<'t> {
    pub loss: Var<'t>,
    pub trajectory: Trajectory,
}

/// Run the closed loop for `cost.horizon` steps on `tape` with the given
/// gain source.
pub fn rollout_with<'t>(
    tape: &'t Tape,
    design: &StateSpaceModel,
    schedule: &GainSchedule,
    prior_mean: &Matrix,
    gains: &mut dyn GainSource<'t>,
    sim: &mut Simulator,
    cost: &QuadraticCost,
) -> Result<TracedRollout<'t>> {
    let horizon = cost.horizon;
    if schedule.horizon() < horizon {
        return Err(Error::Contract(format!(
            "gain schedule covers {} steps, horizon is {horizon}",
            schedule.horizon()
        )));
    }
    let truth = sim.truth().clone();
    if truth.state_dim() != design.state_dim()
        || truth.control_dim() != design.control_dim()
        || truth.obs_dim() != design.obs_dim()
    {
        return Err(Error::Dimension {
            op: "rollout",
            lhs: (truth.state_dim(), truth.obs_dim()),
            rhs: (design.state_dim(), design.obs_dim()),
        });
    }

    let f_true = tape.constant(truth.f.clone());
    let g_true = tape.constant(truth.g.clone());
    let h_true = tape.constant(truth.h.clone());
    let f = tape.constant(design.f.clone());
    let g = tape.constant(design.g.clone());
    let h = tape.constant(design.h.clone());
    let q_state = tape.constant(cost.q_state.clone());
    let q_final = tape.constant(cost.q_final.clone());
    let r_control = tape.constant(cost.r_control.clone());
    let x_target = tape.constant(cost.state_target.clone());
    let u_target = tape.constant(cost.control_target.clone());

    let mut x = tape.constant(sim.state().clone());
    let mut x_hat = tape.constant(prior_mean.clone());
    let mut loss = tape.constant(Matrix::scalar(0.0));

    let mut traj = Trajectory {
        states: vec![x.value()],
        observations: Vec::with_capacity(horizon),
        controls: Vec::with_capacity(horizon),
        estimates: vec![x_hat.value()],
        gains: Vec::with_capacity(horizon),
        covariances: gains.covariance().map(|c| vec![c.clone()]),
    };

    for t in 0..horizon {
        let l = tape.constant(schedule.gains[t].clone());
        let u = u_target.sub(l.matmul(x_hat.sub(x_target)?)?)?;

        let dx = x.sub(x_target)?;
        let du = u.sub(u_target)?;
        loss = loss.add(dx.quad_form(q_state)?)?.add(du.quad_form(r_control)?)?;

        let noise = sim.sample_noise();
        x = f_true
            .matmul(x)?
            .add(g_true.matmul(u)?)?
            .add(tape.constant(noise.process))?;
        let y = h_true.matmul(x)?.add(tape.constant(noise.observation))?;
        let x_val = x.value();
        sim.set_state(x_val.clone());

        let x_pred = f.matmul(x_hat)?.add(g.matmul(u)?)?;
        let y_pred = h.matmul(x_pred)?;
        let u_val = u.value();
        let ctx = GainContext {
            step: t + 1,
            observation: y,
            predicted_observation: y_pred,
            predicted_state: x_pred,
        };
        let k = gains.gain(tape, &ctx)?;
        x_hat = x_pred.add(k.matmul(y.sub(y_pred)?)?)?;
        gains.after_update(x_hat, &ctx);

        traj.states.push(x_val);
        traj.observations.push(y.value());
        traj.controls.push(u_val);
        traj.estimates.push(x_hat.value());
        traj.gains.push(k.value());
        if let (Some(covs), Some(c)) = (traj.covariances.as_mut(), gains.covariance()) {
            covs.push(c.clone());
        }
    }
    let dx = x.sub(x_target)?;
    loss = loss.add(dx.quad_form(q_final)?)?;
    Ok(TracedRollout {
        loss,
        trajectory: traj,
    })
}

/// Rollout of `controller` on a caller-provided tape. For the learned
/// variant the network weights are attached as leaves and returned.
pub fn rollout_traced<'t>(
    tape: &'t Tape,
    controller: &Controller,
    sim: &mut Simulator,
    cost: &QuadraticCost,
) -> Result<(TracedRollout<'t>, Option<ParamVars<'t>>)> {
    match &controller.kind {
        ControllerKind::ModelBased => {
            let mut source = KalmanGain::new(&controller.design, controller.prior.covariance.clone());
            let r = rollout_with(
                tape,
                &controller.design,
                &controller.schedule,
                &controller.prior.mean,
                &mut source,
                sim,
                cost,
            )?;
            Ok((r, None))
        }
        ControllerKind::Learned(params) => {
            let vars = params.attach(tape);
            let mut source = NetworkGain::new(tape, vars.clone(), params);
            let r = rollout_with(
                tape,
                &controller.design,
                &controller.schedule,
                &controller.prior.mean,
                &mut source,
                sim,
                cost,
            )?;
            Ok((r, Some(vars)))
        }
    }
}

/// Closed-loop rollout returning the recorded trajectory.
pub fn rollout(controller: &Controller, sim: &mut Simulator, cost: &QuadraticCost) -> Result<Trajectory> {
    let tape = Tape::new();
    let (r, _) = rollout_traced(&tape, controller, sim, cost)?;
    Ok(r.trajectory)
}

/// Quadratic cost of a finished trajectory:
/// `x̃_T' Q_T x̃_T + Σ_{t<T} (x̃_t' Q x̃_t + ũ_t' R ũ_t)`.
pub fn lqg_loss(traj: &Trajectory, cost: &QuadraticCost) -> Result<f64> {
    let horizon = traj.horizon();
    if traj.states.len() != horizon + 1 {
        return Err(Error::Contract("trajectory is incomplete".into()));
    }
    let mut total = 0.0;
    for t in 0..horizon {
        total += cost.q_state.quad_form(&traj.states[t].sub(&cost.state_target)?)?;
        total += cost
            .r_control
            .quad_form(&traj.controls[t].sub(&cost.control_target)?)?;
    }
    total += cost
        .q_final
        .quad_form(&traj.states[horizon].sub(&cost.state_target)?)?;
    Ok(total)
}

/// `(1/T) Σ_{t=1..T} ‖x_t - x̂_t‖²`.
pub fn state_mse(traj: &Trajectory) -> Result<f64> {
    let horizon = traj.horizon();
    if horizon == 0 {
        return Ok(0.0);
    }
    if traj.estimates.len() != horizon + 1 {
        return Err(Error::Contract("trajectory has no estimates".into()));
    }
    let mut total = 0.0;
    for t in 1..=horizon {
        total += traj.states[t].sub(&traj.estimates[t])?.norm_squared();
    }
    Ok(total / horizon as f64)
}

/// `10 log10(value)`.
pub fn to_db(value: f64) -> Result<f64> {
    if !(value > 0.0) || !value.is_finite() {
        return Err(Error::Domain(format!("cannot express {value} in dB")));
    }
    Ok(10.0 * value.log10())
}

/// Per-trajectory metrics from a Monte-Carlo run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub loss: f64,
    pub mse: f64,
}

/// Roll out `controller` on `count` simulators of `truth`, seeded
/// `(seed, stream = 0..count)`, all starting at `x0`.
pub fn monte_carlo(
    controller: &Controller,
    truth: &StateSpaceModel,
    cost: &QuadraticCost,
    x0: &Matrix,
    seed: u64,
    count: usize,
) -> Result<Vec<RunMetrics>> {
    (0..count as u64)
        .into_par_iter()
        .map(|stream| {
            let mut sim = Simulator::new(truth.clone(), x0.clone(), seed, stream)?;
            let traj = rollout(controller, &mut sim, cost)?;
            Ok(RunMetrics {
                loss: lqg_loss(&traj, cost)?,
                mse: state_mse(&traj)?,
            })
        })
        .collect()
}

/// Calibration of the model-based estimator on its own design model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyReport {
    /// Mean of `‖x_t - x̂_t‖²` over `t = 1..T` and all trajectories.
    pub empirical_mse: f64,
    /// Mean of `tr Σ_t` over `t = 1..T`.
    pub mean_trace: f64,
    /// Largest magnitude over coordinates of the pooled lag-1
    /// autocorrelation of the innovations.
    pub innovation_lag1: f64,
    pub trajectories: usize,
}

/// Closed-loop model-based runs on `model` itself from a known `x0`.
pub fn filter_consistency(
    model: &StateSpaceModel,
    cost: &QuadraticCost,
    x0: &Matrix,
    seed: u64,
    count: usize,
) -> Result<ConsistencyReport> {
    let controller = Controller::model_based(model.clone(), cost, Belief::known(x0.clone()))?;
    let horizon = cost.horizon;
    let n = model.obs_dim();
    let runs: Vec<(f64, f64, Vec<f64>, Vec<f64>)> = (0..count as u64)
        .into_par_iter()
        .map(|stream| {
            let mut sim = Simulator::new(model.clone(), x0.clone(), seed, stream)?;
            let traj = rollout(&controller, &mut sim, cost)?;
            let covs = traj
                .covariances
                .as_ref()
                .ok_or_else(|| Error::Contract("model-based rollout without covariances".into()))?;
            let trace: f64 = covs[1..].iter().map(Matrix::trace).sum();
            let innovations = traj.innovations(model)?;
            let mut lag = vec![0.0; n];
            let mut energy = vec![0.0; n];
            for (t, d) in innovations.iter().enumerate() {
                for i in 0..n {
                    energy[i] += d[(i, 0)] * d[(i, 0)];
                    if let Some(next) = innovations.get(t + 1) {
                        lag[i] += d[(i, 0)] * next[(i, 0)];
                    }
                }
            }
            Ok((state_mse(&traj)? * horizon as f64, trace, lag, energy))
        })
        .collect::<Result<_>>()?;

    let steps = (count * horizon) as f64;
    let mut lag = vec![0.0; n];
    let mut energy = vec![0.0; n];
    let (mut sq_err, mut trace) = (0.0, 0.0);
    for (e, tr, l, en) in &runs {
        sq_err += e;
        trace += tr;
        for i in 0..n {
            lag[i] += l[i];
            energy[i] += en[i];
        }
    }
    let innovation_lag1 = lag
        .iter()
        .zip(&energy)
        .map(|(l, e)| (l / e).abs())
        .fold(0.0, f64::max);
    Ok(ConsistencyReport {
        empirical_mse: sq_err / steps,
        mean_trace: trace / steps,
        innovation_lag1,
        trajectories: count,
    })
}

/// Mean with a normal-approximation 95% confidence halfwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub halfwidth: f64,
    pub count: usize,
}

impl MeanEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return MeanEstimate {
                mean: f64::NAN,
                halfwidth: f64::NAN,
                count: 0,
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let halfwidth = if n > 1 {
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        MeanEstimate {
            mean,
            halfwidth,
            count: n,
        }
    }

    pub fn mean_db(&self) -> Result<f64> {
        to_db(self.mean)
    }

    /// Halfwidth expressed as a dB offset above the mean.
    pub fn halfwidth_db(&self) -> Result<f64> {
        Ok(to_db(self.mean + self.halfwidth)? - to_db(self.mean)?)
    }
}

/// Write `t,x_*,y_*,u_*,xhat_*` rows for `t = 0..T`. Cells without a value
/// (`y_0`, `u_T`) are left empty.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, out: &mut W) -> io::Result<()> {
    let m = traj.states[0].rows();
    let n = traj.observations.first().map_or(0, Matrix::rows);
    let q = traj.controls.first().map_or(0, Matrix::rows);
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|i| format!("x_{i}")));
    header.extend((1..=n).map(|i| format!("y_{i}")));
    header.extend((1..=q).map(|i| format!("u_{i}")));
    header.extend((1..=m).map(|i| format!("xhat_{i}")));
    writeln!(out, "{}", header.join(","))?;

    let cells = |v: Option<&Matrix>, len: usize| -> Vec<String> {
        match v {
            Some(v) => v.as_slice().iter().map(|x| format!("{x}")).collect(),
            None => vec![String::new(); len],
        }
    };
    for t in 0..=traj.horizon() {
        let mut row = vec![t.to_string()];
        row.extend(cells(Some(&traj.states[t]), m));
        row.extend(cells(t.checked_sub(1).map(|i| &traj.observations[i]), n));
        row.extend(cells(traj.controls.get(t), q));
        row.extend(cells(Some(&traj.estimates[t]), m));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gain_net::GainNetConfig;

    fn cost(t: usize) -> QuadraticCost {
        QuadraticCost::identity(2, 1, t)
    }

    #[test]
    fn loss_hand_evaluation() {
        let traj = Trajectory {
            states: vec![Matrix::column(&[1.0, 0.0]), Matrix::column(&[0.0, 0.0])],
            observations: vec![Matrix::zeros(2, 1)],
            controls: vec![Matrix::column(&[2.0])],
            estimates: vec![Matrix::zeros(2, 1); 2],
            gains: vec![Matrix::zeros(2, 2)],
            covariances: None,
        };
        assert_eq!(lqg_loss(&traj, &cost(1)).unwrap(), 5.0);
        assert_eq!(lqg_loss(&traj, &cost(1).scaled(3.0)).unwrap(), 15.0);
        assert_eq!(state_mse(&traj).unwrap(), 0.0);
    }

    #[test]
    fn zero_trajectory_costs_nothing() {
        let traj = Trajectory {
            states: vec![Matrix::zeros(2, 1); 3],
            observations: vec![Matrix::zeros(2, 1); 2],
            controls: vec![Matrix::zeros(1, 1); 2],
            estimates: vec![Matrix::zeros(2, 1); 3],
            gains: vec![Matrix::zeros(2, 2); 2],
            covariances: None,
        };
        assert_eq!(lqg_loss(&traj, &cost(2)).unwrap(), 0.0);
    }

    #[test]
    fn mse_single_step() {
        let traj = Trajectory {
            states: vec![Matrix::zeros(2, 1), Matrix::column(&[1.0, 0.0])],
            observations: vec![Matrix::zeros(2, 1)],
            controls: vec![Matrix::zeros(1, 1)],
            estimates: vec![Matrix::zeros(2, 1), Matrix::zeros(2, 1)],
            gains: vec![Matrix::zeros(2, 2)],
            covariances: None,
        };
        assert_eq!(state_mse(&traj).unwrap(), 1.0);
    }

    #[test]
    fn db_conversion() {
        assert_eq!(to_db(1.0).unwrap(), 0.0);
        assert_eq!(to_db(10.0).unwrap(), 10.0);
        assert!((to_db(0.5).unwrap() + 3.0103).abs() < 1e-4);
        assert!(matches!(to_db(0.0), Err(Error::Domain(_))));
        assert!(to_db(-1.0).is_err());
    }

    #[test]
    fn zero_horizon_only_terminal_term() {
        let design = StateSpaceModel::double_integrator(Matrix::identity(2), Matrix::identity(2)).unwrap();
        let x0 = Matrix::column(&[3.0, 4.0]);
        let c = cost(0);
        let ctrl = Controller::model_based(design.clone(), &c, Belief::known(x0.clone())).unwrap();
        let mut sim = Simulator::new(design, x0, 1, 0).unwrap();
        let traj = rollout(&ctrl, &mut sim, &c).unwrap();
        assert_eq!(traj.states.len(), 1);
        assert_eq!(lqg_loss(&traj, &c).unwrap(), 25.0);
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let design = StateSpaceModel::double_integrator(Matrix::identity(2), Matrix::identity(2)).unwrap();
        let x0 = Matrix::column(&[10.0, 0.0]);
        let c = cost(15);
        let params = GainNetParams::init(2, 2, GainNetConfig { embed: 6, hidden: 5 }, 4).unwrap();
        let ctrl = Controller::learned(design.clone(), &c, Belief::known(x0.clone()), params).unwrap();
        let tape = Tape::new();
        let mut sim = Simulator::new(design, x0, 2, 0).unwrap();
        let (r, vars) = rollout_traced(&tape, &ctrl, &mut sim, &c).unwrap();
        assert!(vars.is_some());
        let plain = lqg_loss(&r.trajectory, &c).unwrap();
        assert!((r.loss.value().item() - plain).abs() <= 1e-12 * plain);
    }

    #[test]
    fn trajectory_csv_schema() {
        let design = StateSpaceModel::double_integrator(Matrix::identity(2), Matrix::identity(2)).unwrap();
        let x0 = Matrix::column(&[10.0, 0.0]);
        let c = cost(4);
        let ctrl = Controller::model_based(design.clone(), &c, Belief::known(x0.clone())).unwrap();
        let mut sim = Simulator::new(design, x0, 1, 0).unwrap();
        let traj = rollout(&ctrl, &mut sim, &c).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x_1,x_2,y_1,y_2,u_1,xhat_1,xhat_2");
        assert_eq!(lines.len(), 1 + 5);
        assert!(lines[1].starts_with("0,10,0,,,"));
        assert!(lines[5].split(',').nth(5).unwrap().is_empty());
        assert!(!text.contains('e'), "plain decimal output");
    }

    #[test]
    fn halfwidth_shrinks_with_samples() {
        let xs: Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
        let e = MeanEstimate::from_samples(&xs);
        assert!(e.halfwidth > 0.0);
        assert_eq!(MeanEstimate::from_samples(&[2.0]).halfwidth, 0.0);
    }
}
