use feedback_core::io::{read_field, write_field};
use feedback_core::lqr::fit_linear_gain;
use feedback_core::problem::lqr_to_problem;
use feedback_core::{
    ensemble_objective, run_descent, sample_lattice, solve_costate, ConstraintSet, DescentConfig64, DescentStatus,
    DirectionMode, Grid, Grid64, GridField, GridField64, LqrSpec, LqrSpec64, TimeGrid, TimeGrid64,
};
use nalgebra::DVector;

fn scalar_lqr() -> LqrSpec64 {
    // f = u, F = ½(x² + u²), g ≡ 0; optimal gain −tanh(T − t)
    LqrSpec::scalar(0.0, 1.0, 1.0, 1.0, 0.0)
}

fn starts() -> Vec<feedback_core::Sample64> {
    let times: Vec<f64> = (0..10).map(|i| 0.05 * i as f64).collect();
    sample_lattice(&[-2.0], &[2.0], &[17], &times).unwrap()
}

#[test]
fn poisson_descent_from_zero_approaches_riccati_gain() {
    let prob = lqr_to_problem(&scalar_lqr()).unwrap();
    let grid = Grid64::uniform(1, -2.0, 2.0, 81).unwrap();
    let tg = TimeGrid64::new(0.0, 1.0, 50).unwrap();
    let mut cfg = DescentConfig64::new(DirectionMode::Poisson, starts());
    cfg.tol = 5e-3;
    cfg.max_iter = 60;
    cfg.measure_box = Some((vec![-1.0], vec![1.0]));
    let u0 = GridField64::zeros(grid, tg, 1);
    let out = run_descent(&prob, &cfg, u0).unwrap();
    assert!(out.report.max_objective_increase() <= 0.0);
    let first = out.report.records[0].objective;
    assert!(out.report.final_record().objective < first);
    for k in [0, 25] {
        let t = out.field.time_grid().time(k);
        let fit = fit_linear_gain(&out.field, k, &[-1.0], &[1.0]).unwrap();
        let expect = -(1.0 - t).tanh();
        let rel = (fit.gain[(0, 0)] - expect).abs() / expect.abs();
        assert!(rel < 0.05, "t = {t}: gain {} vs {expect} ({:?})", fit.gain[(0, 0)], out.report.status);
    }
}

#[test]
fn obstacle_descent_respects_the_box() {
    let prob = lqr_to_problem(&scalar_lqr())
        .unwrap()
        .with_constraint(ConstraintSet::bounds(vec![-0.5], vec![0.5]).unwrap())
        .unwrap();
    let grid = Grid64::uniform(1, -2.0, 2.0, 41).unwrap();
    let tg = TimeGrid64::new(0.0, 1.0, 40).unwrap();
    let mut cfg = DescentConfig64::new(DirectionMode::Obstacle, starts());
    cfg.max_iter = 15;
    let out = run_descent(&prob, &cfg, GridField64::zeros(grid, tg, 1)).unwrap();
    assert_ne!(out.report.status, DescentStatus::Stalled);
    assert!(out.field.values().iter().all(|v| (-0.5..=0.5).contains(v)));
    assert!(out.report.max_objective_increase() <= 0.0);
    let j = ensemble_objective(&prob, &out.field, &cfg.samples).unwrap();
    assert!(j < out.report.records[0].objective);
}

#[test]
fn field_files_round_trip_in_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid64::new(vec![-1.0, 0.0], vec![1.0, 2.0], vec![5, 4]).unwrap();
    let tg = TimeGrid64::new(0.0, 0.5, 3).unwrap();
    let field = GridField::from_fn(grid, tg, 2, |t, x| {
        DVector::from_vec(vec![(x[0] * 1.7).sin() + t / 3.0, x[1].exp() * 0.1])
    });
    let path = dir.path().join("f64.csv");
    write_field(&field, "probe", &path).unwrap();
    let (meta, back) = read_field::<f64>(&path).unwrap();
    assert_eq!(meta.name, "probe");
    assert_eq!(back.values(), field.values());
    assert_eq!(back.grid(), field.grid());

    let single: GridField<f32> = GridField::from_fn(
        Grid::uniform(1, -1.0f32, 1.0, 7).unwrap(),
        TimeGrid::new(0.0f32, 1.0, 2).unwrap(),
        1,
        |t, x| DVector::from_element(1, x[0] * 0.3 - t),
    );
    let path = dir.path().join("f32.csv");
    write_field(&single, "single", &path).unwrap();
    let (_, back) = read_field::<f32>(&path).unwrap();
    assert_eq!(back.values(), single.values());
}

#[test]
fn single_precision_costate_matches_closed_form() {
    // zero feedback: p(t, x) = (t − T)x
    let spec: LqrSpec<f32> = LqrSpec::scalar(0.0, 1.0, 1.0, 1.0, 0.0);
    let prob = lqr_to_problem(&spec).unwrap();
    let grid = Grid::uniform(1, -2.0f32, 2.0, 41).unwrap();
    let tg = TimeGrid::new(0.0f32, 1.0, 40).unwrap();
    let p = solve_costate(&prob, &GridField::zeros(grid.clone(), tg.clone(), 1)).unwrap();
    for k in 0..=40 {
        let t = tg.time(k);
        for node in 0..grid.len() {
            let x = grid.coord(0, node);
            assert!((p.node(k, node)[0] - (t - 1.0) * x).abs() < 1e-4);
        }
    }
}
