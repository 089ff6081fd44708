//! Subcommand implementations behind the `lqg-bench` binary.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use lqg_core::closed_loop::{lqg_loss, rollout, state_mse, to_db, write_trajectory_csv, Trajectory};
use lqg_core::dynamics::Simulator;
use lqg_core::gain_net::{load_checkpoint, save_checkpoint, GainNetParams};
use lqg_core::training::{grad_check, initial_params, TrainReport};

use crate::config::{parse_config, ExperimentConfig, Setting};
use crate::error::{BenchError, CoreContext, Result};
use crate::experiment::{
    run_experiment, run_trajectory_demo, write_train_curve, CellModels, ControllerName, ResultsTable,
};

/// Resolved configuration plus command-line selections.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: ExperimentConfig,
    /// `--setting`; single-cell commands fall back to `[mismatch]`,
    /// `reproduce` to all settings.
    pub setting: Option<Setting>,
    /// `--noise-db`; single-cell commands need exactly one value.
    pub noise_db: Option<Vec<f64>>,
    pub quiet: bool,
}

impl Context {
    /// Load `config` (or the defaults) and apply `--out` and `--seed`.
    pub fn load(
        config: Option<&Path>,
        out: Option<PathBuf>,
        seed: Option<u64>,
        setting: Option<Setting>,
        noise_db: Option<Vec<f64>>,
        quiet: bool,
    ) -> Result<Self> {
        let mut cfg = match config {
            Some(path) => parse_config(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = out {
            cfg.out = out;
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        if let Some(list) = &noise_db {
            if let Some(db) = list.iter().find(|d| !d.is_finite()) {
                return Err(BenchError::Config(format!("--noise-db contains {db}")));
            }
        }
        Ok(Context {
            cfg,
            setting,
            noise_db,
            quiet,
        })
    }

    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    pub fn single_setting(&self) -> Setting {
        self.setting.unwrap_or_else(|| self.cfg.default_setting())
    }

    pub fn single_noise_db(&self) -> Result<f64> {
        match self.noise_db.as_deref() {
            None => Ok(self.cfg.run.noise_db),
            Some([db]) => Ok(*db),
            Some(list) => Err(BenchError::Config(format!(
                "this command runs one noise level, --noise-db lists {}",
                list.len()
            ))),
        }
    }

    pub fn cell(&self) -> Result<CellModels> {
        let setting = self.single_setting();
        let cell = CellModels::new(&self.cfg, setting, self.single_noise_db()?)?;
        Ok(cell)
    }

    fn output(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.cfg.out).map_err(|e| BenchError::io(&self.cfg.out, e))?;
        Ok(self.cfg.out.join(name))
    }

    fn write(&self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<PathBuf> {
        let path = self.output(name)?;
        let file = File::create(&path).map_err(|e| BenchError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w).and_then(|_| w.flush()).map_err(|e| BenchError::io(&path, e))?;
        Ok(path)
    }

    fn write_trajectories(&self, trajectories: &[(ControllerName, Trajectory)], cell: &CellModels) -> Result<()> {
        for (name, traj) in trajectories {
            let path = self.write(&format!("trajectory_{name}.csv"), |w| write_trajectory_csv(traj, w))?;
            let loss = lqg_loss(traj, &cell.cost).and_then(to_db).context("trajectory loss")?;
            let mse = state_mse(traj).and_then(to_db).context("trajectory mse")?;
            self.log(&format!("{name}: loss {loss:.3} dB, mse {mse:.3} dB -> {}", path.display()));
        }
        Ok(())
    }

    fn write_report(&self, report: &TrainReport) -> Result<()> {
        let curve = self.write("train_curve.csv", |w| write_train_curve(report, w))?;
        let ckpt = self.output("checkpoint.txt")?;
        save_checkpoint(&report.params, &ckpt).context("final checkpoint")?;
        let last = report.losses_db.last().copied().unwrap_or(f64::NAN);
        self.log(&format!(
            "trained {} iterations in {:.1} s, final loss {last:.3} dB -> {}, {}",
            report.losses.len(),
            report.wall_time.as_secs_f64(),
            curve.display(),
            ckpt.display()
        ));
        Ok(())
    }

    fn train_cell(&self, cell: &CellModels) -> Result<TrainReport> {
        let out = self.cfg.out.clone();
        let mut checkpoint = |iteration: usize, params: &GainNetParams| {
            fs::create_dir_all(&out)
                .map_err(|e| lqg_core::Error::Checkpoint(format!("{}: {e}", out.display())))?;
            save_checkpoint(params, &out.join(format!("checkpoint_{iteration}.txt")))
        };
        self.log(&format!("training {} at {} dB", cell.setting, cell.noise_db));
        let report = cell.train(&self.cfg, &mut checkpoint)?;
        self.write_report(&report)?;
        Ok(report)
    }

    fn load_params(&self, path: &Path) -> Result<GainNetParams> {
        load_checkpoint(path).context(format!("loading {}", path.display()))
    }
}

/// Roll out each controller once on stream `[run].stream` and export the
/// trajectories. The learned controller needs a checkpoint.
pub fn simulate(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let cell = ctx.cell()?;
    let params = checkpoint.map(|p| ctx.load_params(p)).transpose()?;
    let mut trajectories = Vec::new();
    for name in ControllerName::ALL {
        if name == ControllerName::Learned && params.is_none() {
            continue;
        }
        let controller = cell.controller(&ctx.cfg, name, params.as_ref())?;
        let mut sim = Simulator::new(cell.truth.clone(), ctx.cfg.x0(), ctx.cfg.seeds().test, ctx.cfg.run.stream)
            .context("simulator")?;
        let traj = rollout(&controller, &mut sim, &cell.cost).context(format!("{name} rollout"))?;
        trajectories.push((name, traj));
    }
    ctx.write_trajectories(&trajectories, &cell)
}

/// Train one cell; writes `train_curve.csv`, periodic checkpoints and the
/// final `checkpoint.txt`.
pub fn train(ctx: &Context) -> Result<()> {
    let cell = ctx.cell()?;
    ctx.train_cell(&cell)?;
    Ok(())
}

/// Evaluate all controllers of one cell with trained parameters.
pub fn evaluate(ctx: &Context, checkpoint: &Path) -> Result<ResultsTable> {
    let cell = ctx.cell()?;
    let params = ctx.load_params(checkpoint)?;
    let rows = ControllerName::ALL
        .iter()
        .map(|&name| cell.evaluate(&ctx.cfg, name, Some(&params)))
        .collect::<Result<Vec<_>>>()?;
    let table = ResultsTable { rows };
    let path = ctx.write("results.csv", |w| table.write_csv(w))?;
    for r in &table.rows {
        ctx.log(&format!(
            "{}: loss {:.3} ± {:.3} dB, mse {:.3} ± {:.3} dB",
            r.controller, r.lqg_loss_db, r.lqg_loss_ci95_db, r.state_mse_db, r.state_mse_ci95_db
        ));
    }
    ctx.log(&format!("-> {}", path.display()));
    Ok(table)
}

/// Directional finite-difference check of the closed-loop gradient at
/// randomly initialised weights. Fails with a numeric error above the tolerance.
pub fn grad_check_command(ctx: &Context) -> Result<f64> {
    let cell = ctx.cell()?;
    let gc = &ctx.cfg.grad_check;
    let mut tc = ctx.cfg.train_config();
    // a zero head would hide the recurrent layers from the check
    tc.zero_head = false;
    let mut cost = cell.cost.clone();
    cost.horizon = gc.horizon;
    let sim = Simulator::with_random_initial(
        cell.truth.clone(),
        &ctx.cfg.x0(),
        ctx.cfg.train.x0_std,
        ctx.cfg.seeds().train_data,
        ctx.cfg.run.stream,
    )
    .context("simulator")?;
    let params = initial_params(&cell.design, &tc).context("initial weights")?;
    let err = grad_check(
        &cell.design,
        &sim,
        &ctx.cfg.x0(),
        &cost,
        &params,
        tc.regularization,
        gc.directions,
        gc.epsilon,
    )
    .context("gradient check")?;
    ctx.log(&format!(
        "gradient check over {} directions, T = {}: max relative error {err:e}",
        gc.directions, gc.horizon
    ));
    if err.is_nan() || err > gc.tolerance {
        return Err(BenchError::Tolerance {
            what: "gradient relative error".into(),
            value: err,
            tolerance: gc.tolerance,
        });
    }
    Ok(err)
}

/// Full grid; writes `results.csv`.
pub fn reproduce(ctx: &Context) -> Result<ResultsTable> {
    let mut cfg = ctx.cfg.clone();
    if let Some(list) = &ctx.noise_db {
        cfg.noise.sweep_db = list.clone();
    }
    let settings = match ctx.setting {
        Some(s) => vec![s],
        None => Setting::ALL.to_vec(),
    };
    let table = run_experiment(&cfg, &settings, &|msg| ctx.log(msg))?;
    let path = ctx.write("results.csv", |w| table.write_csv(w))?;
    ctx.log(&format!("{} rows -> {}", table.rows.len(), path.display()));
    Ok(table)
}

/// Single-trajectory comparison of all controllers. Trains first unless a
/// checkpoint is given.
pub fn demo(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let cell = ctx.cell()?;
    let params = match checkpoint {
        Some(p) => ctx.load_params(p)?,
        None => ctx.train_cell(&cell)?.params,
    };
    let trajectories = run_trajectory_demo(&ctx.cfg, &cell, &params, ctx.cfg.run.stream)?;
    ctx.write_trajectories(&trajectories, &cell)
}
