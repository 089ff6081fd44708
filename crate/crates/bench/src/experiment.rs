//! Grid runner: trains and evaluates controllers for every
//! `(setting, noise level)` cell and exports plot data.

use std::fmt;
use std::io::Write;

use lqg_core::closed_loop::{monte_carlo, rollout, Controller, MeanEstimate, Trajectory};
use lqg_core::dynamics::{apply_mismatch, Simulator, StateSpaceModel};
use lqg_core::estimation::Belief;
use lqg_core::gain_net::GainNetParams;
use lqg_core::regulation::QuadraticCost;
use lqg_core::training::{initial_params, train_from, RandomInitFactory, TrainReport};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Setting};
use crate::error::{BenchError, CoreContext, Result};

/// Controllers compared in every cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerName {
    /// Kalman filter and LQR built from the ground-truth model.
    Optimal,
    /// Kalman filter and LQR built from the design model.
    KfLqr,
    /// Design-model prediction and LQR with the trained gain network.
    Learned,
}

impl ControllerName {
    pub const ALL: [ControllerName; 3] = [ControllerName::Optimal, ControllerName::KfLqr, ControllerName::Learned];

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerName::Optimal => "optimal",
            ControllerName::KfLqr => "kf-lqr",
            ControllerName::Learned => "learned",
        }
    }
}

impl fmt::Display for ControllerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Design and ground-truth models of one grid cell.
#[derive(Debug, Clone)]
pub struct CellModels {
    pub setting: Setting,
    pub noise_db: f64,
    pub design: StateSpaceModel,
    pub truth: StateSpaceModel,
    pub cost: QuadraticCost,
}

impl CellModels {
    pub fn new(cfg: &ExperimentConfig, setting: Setting, noise_db: f64) -> Result<Self> {
        let design = cfg.design_model(noise_db)?;
        let truth = apply_mismatch(&design, setting.mismatch(cfg.mismatch.alpha))
            .context(format!("{setting} at {noise_db} dB"))?;
        Ok(CellModels {
            setting,
            noise_db,
            design,
            truth,
            cost: cfg.quadratic_cost()?,
        })
    }

    fn label(&self) -> String {
        format!("{} at {} dB", self.setting, self.noise_db)
    }

    pub fn controller(&self, cfg: &ExperimentConfig, name: ControllerName, params: Option<&GainNetParams>) -> Result<Controller> {
        let prior = Belief::known(cfg.x0());
        let built = match name {
            ControllerName::Optimal => Controller::model_based(self.truth.clone(), &self.cost, prior),
            ControllerName::KfLqr => Controller::model_based(self.design.clone(), &self.cost, prior),
            ControllerName::Learned => {
                let params = params.ok_or_else(|| BenchError::Config("learned controller needs parameters".into()))?;
                Controller::learned(self.design.clone(), &self.cost, prior, params.clone())
            }
        };
        built.context(format!("{name} controller, {}", self.label()))
    }

    /// Train the gain network against this cell's ground truth.
    pub fn train(
        &self,
        cfg: &ExperimentConfig,
        on_checkpoint: &mut dyn FnMut(usize, &GainNetParams) -> lqg_core::Result<()>,
    ) -> Result<TrainReport> {
        let tc = cfg.train_config();
        let factory = RandomInitFactory {
            truth: self.truth.clone(),
            x0_mean: cfg.x0(),
            x0_std: cfg.train.x0_std,
            seed: cfg.seeds().train_data,
        };
        let context = format!("training {}", self.label());
        let init = initial_params(&self.design, &tc).context(context.clone())?;
        train_from(&self.design, &factory, &self.cost, &tc, init, on_checkpoint).context(context)
    }

    /// Monte-Carlo metrics of `name` over the shared test seeds.
    pub fn evaluate(&self, cfg: &ExperimentConfig, name: ControllerName, params: Option<&GainNetParams>) -> Result<ResultRow> {
        let controller = self.controller(cfg, name, params)?;
        let runs = monte_carlo(
            &controller,
            &self.truth,
            &self.cost,
            &cfg.x0(),
            cfg.seeds().test,
            cfg.eval.test_seeds,
        )
        .context(format!("evaluating {name}, {}", self.label()))?;
        let loss: Vec<f64> = runs.iter().map(|r| r.loss).collect();
        let mse: Vec<f64> = runs.iter().map(|r| r.mse).collect();
        ResultRow::new(self.setting, self.noise_db, name, MeanEstimate::from_samples(&loss), MeanEstimate::from_samples(&mse))
    }
}

/// Aggregated metrics of one controller in one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub setting: Setting,
    pub noise_db: f64,
    pub controller: ControllerName,
    pub loss: MeanEstimate,
    pub mse: MeanEstimate,
    pub lqg_loss_db: f64,
    pub lqg_loss_ci95_db: f64,
    pub state_mse_db: f64,
    pub state_mse_ci95_db: f64,
}

impl ResultRow {
    pub fn new(
        setting: Setting,
        noise_db: f64,
        controller: ControllerName,
        loss: MeanEstimate,
        mse: MeanEstimate,
    ) -> Result<Self> {
        let context = format!("{controller} metrics, {setting} at {noise_db} dB");
        Ok(ResultRow {
            setting,
            noise_db,
            controller,
            lqg_loss_db: loss.mean_db().context(context.clone())?,
            lqg_loss_ci95_db: loss.halfwidth_db().context(context.clone())?,
            state_mse_db: mse.mean_db().context(context.clone())?,
            state_mse_ci95_db: mse.halfwidth_db().context(context)?,
            loss,
            mse,
        })
    }
}

/// Header of `results.csv`.
pub const RESULTS_HEADER: [&str; 7] = [
    "setting",
    "noise_db",
    "controller",
    "lqg_loss_db",
    "lqg_loss_ci95_db",
    "state_mse_db",
    "state_mse_ci95_db",
];

/// Header of `train_curve.csv`.
pub const TRAIN_CURVE_HEADER: [&str; 4] = ["iteration", "loss", "loss_db", "grad_norm"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

fn decimal(v: f64) -> String {
    format!("{v:.6}")
}

impl ResultsTable {
    pub fn find(&self, setting: Setting, noise_db: f64, controller: ControllerName) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.setting == setting && r.noise_db == noise_db && r.controller == controller)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(RESULTS_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.setting.as_str().to_string(),
                decimal(r.noise_db),
                r.controller.as_str().to_string(),
                decimal(r.lqg_loss_db),
                decimal(r.lqg_loss_ci95_db),
                decimal(r.state_mse_db),
                decimal(r.state_mse_ci95_db),
            ])?;
        }
        w.flush()
    }
}

pub fn write_train_curve<W: Write>(report: &TrainReport, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAIN_CURVE_HEADER)?;
    for (i, ((loss, db), norm)) in report
        .losses
        .iter()
        .zip(&report.losses_db)
        .zip(&report.grad_norms)
        .enumerate()
    {
        w.write_record([(i + 1).to_string(), decimal(*loss), decimal(*db), decimal(*norm)])?;
    }
    w.flush()
}

/// Trained parameters and metrics of one cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub rows: Vec<ResultRow>,
    pub report: TrainReport,
}

/// Train the learned controller for one cell and evaluate all three
/// controllers on the shared test seeds.
pub fn run_cell(cfg: &ExperimentConfig, setting: Setting, noise_db: f64) -> Result<CellOutcome> {
    let cell = CellModels::new(cfg, setting, noise_db)?;
    let report = cell.train(cfg, &mut |_, _| Ok(()))?;
    let rows = ControllerName::ALL
        .iter()
        .map(|&name| cell.evaluate(cfg, name, Some(&report.params)))
        .collect::<Result<_>>()?;
    Ok(CellOutcome { rows, report })
}

/// Run every `(setting, noise level)` cell. Cells run in parallel; rows are
/// ordered by setting, then noise level as listed, then controller.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    settings: &[Setting],
    progress: &(dyn Fn(&str) + Sync),
) -> Result<ResultsTable> {
    let cells: Vec<(Setting, f64)> = settings
        .iter()
        .flat_map(|&s| cfg.noise.sweep_db.iter().map(move |&db| (s, db)))
        .collect();
    let outcomes: Vec<Result<CellOutcome>> = cells
        .par_iter()
        .map(|&(setting, db)| {
            let outcome = run_cell(cfg, setting, db)?;
            let summary: Vec<String> = outcome
                .rows
                .iter()
                .map(|r| format!("{} {:.2} dB", r.controller, r.lqg_loss_db))
                .collect();
            progress(&format!("{setting} {db} dB: {}", summary.join(", ")));
            Ok(outcome)
        })
        .collect();
    let mut table = ResultsTable::default();
    for outcome in outcomes {
        table.rows.extend(outcome?.rows);
    }
    Ok(table)
}

/// Single-trajectory rollouts of every controller on test stream
/// `stream` of the cell's ground truth.
pub fn run_trajectory_demo(
    cfg: &ExperimentConfig,
    cell: &CellModels,
    params: &GainNetParams,
    stream: u64,
) -> Result<Vec<(ControllerName, Trajectory)>> {
    ControllerName::ALL
        .iter()
        .map(|&name| {
            let controller = cell.controller(cfg, name, Some(params))?;
            let mut sim = Simulator::new(cell.truth.clone(), cfg.x0(), cfg.seeds().test, stream)
                .context("demo simulator")?;
            let traj = rollout(&controller, &mut sim, &cell.cost).context(format!("{name} demo rollout"))?;
            Ok((name, traj))
        })
        .collect()
}
