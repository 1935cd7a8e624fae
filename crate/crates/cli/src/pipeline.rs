//! Orchestration of one run: build, descend, verify, write.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use feedback_core::descent::{gaussian_bump, gradient_of, stationarity_residual, DescentOutcome};
use feedback_core::io::{write_field, write_matrix_path_csv, write_report_csv, write_trajectory_csv, ReportRow};
use feedback_core::lqr::{compare_with_riccati, lqr_feedback_field};
use feedback_core::oracles::{dp_solve, ControlGrid};
use feedback_core::problem::{academic_problem, lqr_to_problem};
use feedback_core::{
    burgers_eval, directional_derivative_check, run_descent, sample_lattice, verify_academic_feedback,
    BurgersSolution, ConstraintSet, ControlProblem, DescentConfig, DescentStatus, DirectionMode, Error, Grid,
    GridField, LqrSpec, NewtonSettings, Sample, ScalarMap, SolverSettings, TimeGrid,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{
    ConstraintConfig, DriftConfig, InitialField, ModeConfig, ProblemConfig, RunConfig,
};
use crate::summary::{RunStatus, Summary};
use crate::validate::{validate_config, Violation};

/// Overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

pub const OUTPUT_DIR_ENV: &str = "FBSYNTH_OUTPUT_DIR";

impl RunOptions {
    /// Picks the output directory override from the environment.
    pub fn from_env() -> Self {
        Self {
            output_dir: std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from),
            workers: None,
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub status: RunStatus,
    /// Non-empty only for configuration errors.
    pub violations: Vec<Violation>,
    pub output_dir: Option<PathBuf>,
    pub summary: Option<Summary>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        self.status.exit_code()
    }
}

struct StageError {
    stage: &'static str,
    error: anyhow::Error,
}

trait Staged<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T, E: Into<anyhow::Error>> Staged<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError {
            stage,
            error: e.into(),
        })
    }
}

pub fn lqr_spec(problem: &ProblemConfig) -> feedback_core::Result<LqrSpec<f64>> {
    let ProblemConfig::Lqr { a, b, q, r, h, .. } = problem else {
        return Err(Error::InvalidInput("not an lqr problem".into()));
    };
    let mat = |rows: &[Vec<f64>]| {
        let nr = rows.len();
        let nc = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != nc) {
            return Err(Error::InvalidInput("ragged matrix rows".into()));
        }
        Ok(DMatrix::from_row_iterator(nr, nc, rows.iter().flatten().copied()))
    };
    Ok(LqrSpec {
        A: mat(a)?,
        B: mat(b)?,
        Q: mat(q)?,
        R: mat(r)?,
        H: mat(h)?,
    })
}

pub fn drift_map(drift: &DriftConfig) -> ScalarMap<f64> {
    match *drift {
        DriftConfig::Linear { slope, intercept } => ScalarMap::linear(slope, intercept),
        DriftConfig::Sine { amplitude, frequency } => ScalarMap::sine(amplitude, frequency),
    }
}

pub fn constraint_set(c: &ConstraintConfig) -> feedback_core::Result<ConstraintSet<f64>> {
    match c {
        ConstraintConfig::None => Ok(ConstraintSet::Unconstrained),
        ConstraintConfig::Box { lo, hi } => ConstraintSet::bounds(lo.clone(), hi.clone()),
        ConstraintConfig::Ball { center, radius } => ConstraintSet::ball(center.clone(), *radius),
    }
}

pub fn build_problem(config: &RunConfig) -> feedback_core::Result<ControlProblem<f64>> {
    let base = match &config.problem {
        ProblemConfig::Lqr { horizon, .. } => lqr_to_problem(&lqr_spec(&config.problem)?)?.with_horizon(*horizon)?,
        ProblemConfig::Academic { drift, horizon } => academic_problem(drift_map(drift), *horizon)?,
    };
    base.with_constraint(constraint_set(&config.constraint)?)
}

pub fn grids(config: &RunConfig) -> feedback_core::Result<(Grid<f64>, TimeGrid<f64>)> {
    let g = &config.grid;
    let grid = Grid::new(g.lo.clone(), g.hi.clone(), g.nodes.clone())?;
    let tg = TimeGrid::new(0.0, config.problem.horizon(), g.steps)?;
    Ok((grid, tg))
}

pub fn ensemble(config: &RunConfig) -> feedback_core::Result<Vec<Sample<f64>>> {
    let e = &config.ensemble;
    let horizon = config.problem.horizon();
    let times: Vec<f64> = (0..e.start_times)
        .map(|i| horizon * i as f64 / e.start_times as f64)
        .collect();
    sample_lattice(&e.lo, &e.hi, &e.nodes, &times)
}

pub fn descent_config(config: &RunConfig, samples: Vec<Sample<f64>>) -> DescentConfig<f64> {
    let d = &config.descent;
    let mode = match d.mode {
        ModeConfig::Obstacle => DirectionMode::Obstacle,
        ModeConfig::Poisson => DirectionMode::Poisson,
        ModeConfig::Pointwise => DirectionMode::Pointwise,
    };
    let mut c = DescentConfig::new(mode, samples);
    c.tol = d.tol;
    c.max_iter = d.max_iter;
    c.eps_max = d.eps_max;
    c.eps_min = d.eps_min;
    c.eps_growth = d.eps_growth;
    c.armijo_c1 = d.armijo_c1;
    c.backtrack = d.backtrack;
    c.slice_solver = SolverSettings::new(d.slice_tol, d.slice_max_iter);
    c.measure_box = d.measure_box.as_ref().map(|b| (b.lo.clone(), b.hi.clone()));
    c.pointwise_resolution = d.pointwise_resolution;
    c.obstacle_mass = d.obstacle_mass;
    c.obstacle_step = d.obstacle_step;
    c
}

fn riccati_steps(config: &RunConfig) -> usize {
    config
        .verify
        .riccati
        .as_ref()
        .map_or(10 * config.grid.steps.max(10), |r| r.steps)
}

/// Initial feedback, projected into the control set.
pub fn initial_field(
    config: &RunConfig,
    problem: &ControlProblem<f64>,
    grid: &Grid<f64>,
    tg: &TimeGrid<f64>,
) -> feedback_core::Result<GridField<f64>> {
    let m = problem.control_dim;
    let mut u = match config.descent.initial {
        InitialField::Zero => GridField::zeros(grid.clone(), tg.clone(), m),
        InitialField::Riccati => {
            let spec = lqr_spec(&config.problem)?;
            let ric = feedback_core::solve_riccati(&feedback_core::derive_lqr(&spec)?, tg.t_final(), riccati_steps(config))?;
            lqr_feedback_field(&spec, &ric, grid, tg)?
        }
    };
    for node in u.values_mut().chunks_exact_mut(m) {
        problem.constraint.project_in_place(node);
    }
    Ok(u)
}

/// Validates, then executes the configured pipeline on a dedicated pool.
pub fn run(config: &RunConfig, options: &RunOptions) -> RunOutcome {
    let violations = validate_config(config);
    if !violations.is_empty() {
        return RunOutcome {
            status: RunStatus::ConfigError,
            violations,
            output_dir: None,
            summary: None,
        };
    }
    let dir = options.output_dir.clone().unwrap_or_else(|| config.output_dir.clone());
    if let Err(e) = fs::create_dir_all(&dir) {
        return RunOutcome {
            status: RunStatus::ConfigError,
            violations: vec![Violation {
                field: "output_dir".into(),
                message: format!("cannot create {}: {e}", dir.display()),
            }],
            output_dir: None,
            summary: None,
        };
    }
    let workers = options
        .workers
        .filter(|&w| w > 0)
        .or((config.workers > 0).then_some(config.workers))
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    let start = Instant::now();
    let mut summary = Summary::new(config);
    summary.workers = workers;
    let result = match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| execute(config, &dir, &mut summary)),
        Err(e) => Err(StageError {
            stage: "setup",
            error: e.into(),
        }),
    };
    let status = match result {
        Ok(status) => status,
        Err(StageError { stage, error }) => {
            let blowup = error.chain().any(|c| c.downcast_ref::<Error>().is_some_and(is_blowup));
            summary.failed_stage = Some(stage.into());
            summary.error = Some(format!("{error:#}"));
            log::error!("stage {stage} failed: {error:#}");
            if blowup {
                RunStatus::BlowUp
            } else {
                RunStatus::Failed
            }
        }
    };
    summary.set_status(status);
    summary.elapsed_seconds = start.elapsed().as_secs_f64();
    let status = match write_summary(&dir, &summary) {
        Ok(()) => status,
        Err(e) => {
            log::error!("cannot write summary: {e:#}");
            RunStatus::Failed
        }
    };
    RunOutcome {
        status,
        violations: Vec::new(),
        output_dir: Some(dir),
        summary: Some(summary),
    }
}

fn is_blowup(e: &Error) -> bool {
    match e {
        Error::BlowUp { .. } => true,
        Error::SampleFailed { source, .. } => is_blowup(source),
        _ => false,
    }
}

fn write_summary(dir: &Path, summary: &Summary) -> anyhow::Result<()> {
    let path = dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn execute(config: &RunConfig, dir: &Path, summary: &mut Summary) -> Result<RunStatus, StageError> {
    let problem = build_problem(config).stage("setup")?;
    let (grid, tg) = grids(config).stage("setup")?;
    let samples = ensemble(config).stage("setup")?;
    summary.samples = samples.len();
    let dconf = descent_config(config, samples.clone());
    let u0 = initial_field(config, &problem, &grid, &tg).stage("setup")?;

    let outcome = run_descent(&problem, &dconf, u0).stage("descent")?;
    record_descent(summary, &outcome);
    write_descent_outputs(config, dir, &problem, &dconf, &outcome, summary).stage("write")?;

    if config.verify.riccati.is_some() {
        verify_riccati(config, dir, &problem, &dconf, &outcome.field, summary).stage("riccati")?;
    }
    if let Some(gc) = &config.verify.gradient_check {
        let check = gradient_check(config, &problem, &outcome.field, &samples, gc.directions, gc.eps_fd)
            .stage("gradient-check")?;
        summary.gradient_check_worst_rel_err = Some(check.0);
        summary.gradient_check_skipped = Some(check.1);
    }
    if config.verify.dp.is_some() {
        verify_dp(config, dir, &problem, &samples, summary).stage("dp")?;
    }
    if config.verify.burgers.is_some() {
        verify_burgers(config, dir, &outcome.field, &samples, summary).stage("burgers")?;
    }

    Ok(match outcome.report.status {
        DescentStatus::Converged => RunStatus::Converged,
        DescentStatus::Stalled => RunStatus::Stalled,
        DescentStatus::MaxIterations => RunStatus::MaxIterations,
    })
}

fn record_descent(summary: &mut Summary, outcome: &DescentOutcome<f64>) {
    let report = &outcome.report;
    summary.iterations = report.iterations();
    summary.initial_objective = report.records.first().map(|r| r.objective);
    summary.final_objective = Some(report.final_record().objective);
    summary.final_residual = Some(report.final_record().residual);
    summary.max_slice_inner = Some(report.max_slice_inner());
    summary.max_objective_increase = Some(report.max_objective_increase());
}

fn write_descent_outputs(
    config: &RunConfig,
    dir: &Path,
    problem: &ControlProblem<f64>,
    dconf: &DescentConfig<f64>,
    outcome: &DescentOutcome<f64>,
    summary: &mut Summary,
) -> anyhow::Result<()> {
    let mut out = Vec::new();
    write_field(&outcome.field, "feedback", &dir.join("feedback.csv"))?;
    write_field(outcome.costate.field(), "costate", &dir.join("costate.csv"))?;
    write_field(&outcome.gradient, "gradient", &dir.join("gradient.csv"))?;
    out.extend(["feedback.csv", "feedback.json", "costate.csv", "costate.json", "gradient.csv", "gradient.json"]);
    let rows: Vec<ReportRow> = outcome.report.records.iter().map(ReportRow::from).collect();
    write_report_csv(&rows, BufWriter::new(fs::File::create(dir.join("report.csv"))?))?;
    out.push("report.csv");
    summary.outputs.extend(out.into_iter().map(String::from));

    let count = config.output.trajectories.min(dconf.samples.len());
    if count > 0 {
        let tdir = dir.join("trajectories");
        fs::create_dir_all(&tdir)?;
        for (i, s) in dconf.samples.iter().take(count).enumerate() {
            let tr = feedback_core::integrate_flow(problem, &outcome.field, s.t, &s.y)?;
            let name = format!("trajectories/traj_{i:03}.csv");
            write_trajectory_csv(&tr, BufWriter::new(fs::File::create(dir.join(&name))?))?;
            summary.outputs.push(name);
        }
    }
    Ok(())
}

fn verify_riccati(
    config: &RunConfig,
    dir: &Path,
    problem: &ControlProblem<f64>,
    dconf: &DescentConfig<f64>,
    field: &GridField<f64>,
    summary: &mut Summary,
) -> anyhow::Result<()> {
    let check = config.verify.riccati.as_ref().expect("checked by caller");
    let spec = lqr_spec(&config.problem)?;
    let horizon = config.problem.horizon();
    let ric = feedback_core::solve_riccati(&feedback_core::derive_lqr(&spec)?, horizon, check.steps)?;
    write_matrix_path_csv(&ric, BufWriter::new(fs::File::create(dir.join("riccati.csv"))?))?;
    summary.outputs.push("riccati.csv".into());
    let cmp = compare_with_riccati(
        &spec,
        &ric,
        field,
        &check.fit_box.lo,
        &check.fit_box.hi,
        check.t_max_fraction * horizon,
    )?;
    summary.gain_error_vs_riccati = Some(cmp.worst_relative_error);
    summary.gain_error_time = Some(cmp.worst_time);
    summary.gain_fit_residual = Some(cmp.worst_fit_residual);
    let oracle = lqr_feedback_field(&spec, &ric, field.grid(), field.time_grid())?;
    let (_, grad) = gradient_of(problem, &oracle)?;
    summary.oracle_residual = Some(stationarity_residual(problem, &oracle, &grad, &dconf.measure_box));
    Ok(())
}

/// Random Gaussian bumps centred in the ensemble box; returns the worst
/// relative error and the number of skipped samples.
pub fn gradient_check(
    config: &RunConfig,
    problem: &ControlProblem<f64>,
    field: &GridField<f64>,
    samples: &[Sample<f64>],
    directions: usize,
    eps_fd: f64,
) -> anyhow::Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let e = &config.ensemble;
    let horizon = config.problem.horizon();
    let width_x = e
        .lo
        .iter()
        .zip(&e.hi)
        .map(|(l, h)| (h - l).max(1e-3))
        .fold(f64::INFINITY, f64::min)
        * 0.25;
    let (mut worst, mut skipped) = (0.0f64, 0usize);
    for _ in 0..directions {
        let center: Vec<f64> = e.lo.iter().zip(&e.hi).map(|(&l, &h)| if l < h { rng.gen_range(l..h) } else { l }).collect();
        let amplitude: Vec<f64> = (0..problem.control_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t_center = rng.gen_range(0.0..horizon);
        let dir = gaussian_bump(field.grid(), field.time_grid(), &amplitude, &center, t_center, width_x, 0.3 * horizon)?;
        let check = directional_derivative_check(problem, field, &dir, samples, eps_fd)?;
        worst = worst.max(check.worst_rel_err);
        skipped += check.samples.iter().filter(|s| s.skipped).count();
    }
    Ok((worst, skipped))
}

fn verify_dp(
    config: &RunConfig,
    dir: &Path,
    problem: &ControlProblem<f64>,
    samples: &[Sample<f64>],
    summary: &mut Summary,
) -> anyhow::Result<()> {
    let dp = config.verify.dp.as_ref().expect("checked by caller");
    let g = &config.grid;
    let state_grid = Grid::new(g.lo.clone(), g.hi.clone(), vec![dp.state_nodes])?;
    let controls = ControlGrid::uniform_box(&[dp.control_lo], &[dp.control_hi], dp.control_nodes)?;
    let tg = TimeGrid::new(0.0, config.problem.horizon(), dp.steps)?;
    let value = dp_solve(problem, &state_grid, &controls, &tg)?;
    write_field(&value.value, "dp_value", &dir.join("dp_value.csv"))?;
    write_field(&value.policy, "dp_policy", &dir.join("dp_policy.csv"))?;
    summary
        .outputs
        .extend(["dp_value.csv", "dp_value.json", "dp_policy.csv", "dp_policy.json"].map(String::from));
    let mean = samples.iter().map(|s| value.value_at(s.t, s.y.as_slice())).sum::<f64>() / samples.len() as f64;
    summary.dp_mean_value = Some(mean);
    if let Some(j) = summary.final_objective {
        summary.dp_relative_gap = Some((j - mean).abs() / mean.abs().max(f64::MIN_POSITIVE));
    }
    Ok(())
}

/// Optimal control from characteristics, `u*(t, x) = v(t, x) − f(x)` with
/// `v` the backward Burgers solution; NaN outside the classical regime.
pub fn burgers_control_field(
    drift: &ScalarMap<f64>,
    horizon: f64,
    grid: &Grid<f64>,
    tg: &TimeGrid<f64>,
) -> feedback_core::Result<(BurgersSolution<f64>, GridField<f64>)> {
    let samples = (grid.nodes_per_axis()[0] - 1) * 64 + 1;
    let sol = BurgersSolution::sampled(drift.clone(), horizon, grid.lo()[0], grid.hi()[0], samples)?;
    let newton = NewtonSettings::default();
    let field = GridField::from_fn(grid.clone(), tg.clone(), 1, |t, x: &DVector<f64>| {
        let v = burgers_eval(&sol, t, x[0], newton).unwrap_or(f64::NAN);
        DVector::from_element(1, v - drift.value(x[0]))
    });
    Ok((sol, field))
}

fn verify_burgers(
    config: &RunConfig,
    dir: &Path,
    field: &GridField<f64>,
    samples: &[Sample<f64>],
    summary: &mut Summary,
) -> anyhow::Result<()> {
    let check = config.verify.burgers.as_ref().expect("checked by caller");
    let ProblemConfig::Academic { drift, horizon } = &config.problem else {
        anyhow::bail!("Burgers comparison needs an academic problem");
    };
    let drift = drift_map(drift);
    let (grid, tg) = (field.grid(), field.time_grid());
    let (sol, exact) = burgers_control_field(&drift, *horizon, grid, tg)?;
    write_field(&exact, "burgers_control", &dir.join("burgers.csv"))?;
    summary.outputs.extend(["burgers.csv", "burgers.json"].map(String::from));
    summary.burgers_blowup_time = sol.blowup_time();

    let (lo, hi) = (check.compare_box.lo[0], check.compare_box.hi[0]);
    let (mut err, mut scale) = (0.0f64, 0.0f64);
    for k in 0..=tg.steps() {
        for node in 0..grid.len() {
            let x = grid.coord(0, node);
            let e = exact.node(k, node)[0];
            if x < lo || x > hi || !e.is_finite() {
                continue;
            }
            err = err.max((field.node(k, node)[0] - e).abs());
            scale = scale.max(e.abs());
        }
    }
    summary.burgers_max_error = Some(err);
    summary.burgers_relative_error = Some(if scale > 0.0 { err / scale } else { err });

    let report = verify_academic_feedback(&drift, *horizon, grid, tg, samples, NewtonSettings::default())?;
    summary.burgers_euler_lagrange_residual = Some(report.max_euler_lagrange);
    summary.burgers_terminal_residual = Some(report.max_terminal);
    Ok(())
}
