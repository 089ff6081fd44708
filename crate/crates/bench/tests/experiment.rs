use lqg_bench::config::{ExperimentConfig, Setting};
use lqg_bench::experiment::{run_cell, run_experiment, run_trajectory_demo, CellModels, ControllerName};
use lqg_core::training::initial_params;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 5;
    cfg.cost.horizon = 25;
    cfg.train.iterations = 4;
    cfg.train.batch_size = 3;
    cfg.train.embed = Some(4);
    cfg.train.hidden = Some(5);
    cfg.eval.test_seeds = 30;
    cfg.noise.sweep_db = vec![-5.0, 5.0];
    cfg
}

#[test]
fn halfwidth_halves_with_four_times_the_seeds() {
    let mut cfg = ExperimentConfig::default();
    let cell = CellModels::new(&cfg, Setting::Matched, 0.0).unwrap();
    cfg.eval.test_seeds = 250;
    let few = cell.evaluate(&cfg, ControllerName::KfLqr, None).unwrap();
    cfg.eval.test_seeds = 1000;
    let many = cell.evaluate(&cfg, ControllerName::KfLqr, None).unwrap();
    let ratio = few.loss.halfwidth / many.loss.halfwidth;
    assert!((ratio / 2.0 - 1.0).abs() < 0.3, "loss halfwidth ratio {ratio}");
    let ratio = few.mse.halfwidth / many.mse.halfwidth;
    assert!((ratio / 2.0 - 1.0).abs() < 0.3, "mse halfwidth ratio {ratio}");
}

#[test]
fn grid_matches_cell_by_cell_runs() {
    let cfg = tiny();
    let settings = [Setting::MismatchH, Setting::Matched];
    let table = run_experiment(&cfg, &settings, &|_| {}).unwrap();
    assert_eq!(table.rows.len(), 2 * 2 * 3);
    let mut expected = Vec::new();
    for s in settings {
        for &db in &cfg.noise.sweep_db {
            expected.extend(run_cell(&cfg, s, db).unwrap().rows);
        }
    }
    assert_eq!(table.rows, expected);
    assert!(table.rows.iter().all(|r| r.lqg_loss_db.is_finite() && r.state_mse_db.is_finite()));
    let row = table.find(Setting::Matched, 5.0, ControllerName::Learned).unwrap();
    assert_eq!(row.controller, ControllerName::Learned);
}

#[test]
fn matched_optimal_and_model_based_coincide() {
    let cfg = tiny();
    let outcome = run_cell(&cfg, Setting::Matched, 0.0).unwrap();
    assert_eq!(outcome.rows[0].loss, outcome.rows[1].loss);
    assert_eq!(outcome.report.losses.len(), cfg.train.iterations);
}

#[test]
fn demo_exports_horizon_plus_one_states() {
    let cfg = tiny();
    let cell = CellModels::new(&cfg, Setting::MismatchF, 0.0).unwrap();
    let params = initial_params(&cell.design, &cfg.train_config()).unwrap();
    let a = run_trajectory_demo(&cfg, &cell, &params, 3).unwrap();
    let b = run_trajectory_demo(&cfg, &cell, &params, 3).unwrap();
    let names: Vec<ControllerName> = a.iter().map(|(n, _)| *n).collect();
    assert_eq!(names, ControllerName::ALL);
    for ((_, ta), (_, tb)) in a.iter().zip(&b) {
        assert_eq!(ta.states.len(), cfg.cost.horizon + 1);
        assert_eq!(ta.states, tb.states);
    }
}

#[test]
fn noiseless_matched_demo_traces_coincide() {
    let cfg = tiny();
    let cell = CellModels::new(&cfg, Setting::Matched, -160.0).unwrap();
    let params = initial_params(&cell.design, &cfg.train_config()).unwrap();
    let runs = run_trajectory_demo(&cfg, &cell, &params, 0).unwrap();
    let model_based = &runs[1].1;
    let learned = &runs[2].1;
    for (t, (a, b)) in model_based.states.iter().zip(&learned.states).enumerate().skip(1) {
        let gap = a.sub(b).unwrap().max_abs();
        assert!(gap < 1e-6, "t = {t}: gap {gap}");
    }
}
