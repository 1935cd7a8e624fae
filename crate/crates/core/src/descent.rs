//! Gradient field `∇I(u) = F_u − p·f_u` and the iterative feedback descent
//! built on it.

use std::ops::Deref;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::costate::{solve_costate, CostateField};
use crate::error::{Error, Result};
use crate::flow::{ensemble_trajectories, integrate_flow, mean_cost, trajectory_cost, Sample, Trajectory};
use crate::grid::{node_norm, Grid, GridField, TimeGrid};
use crate::obstacle::{poisson_direction, solve_obstacle_slice_from, SliceOperator, SolverSettings};
use crate::oracles::{hamiltonian_argmin, CostateSign};
use crate::problem::ControlProblem;
use crate::scalar::Real;

/// `∇I(u)(t, x)` with `m` components.
#[derive(Clone, Debug)]
pub struct GradientField<T>(GridField<T>);

impl<T: Real> GradientField<T> {
    pub fn field(&self) -> &GridField<T> {
        &self.0
    }

    pub fn into_field(self) -> GridField<T> {
        self.0
    }
}

impl<T> Deref for GradientField<T> {
    type Target = GridField<T>;
    fn deref(&self) -> &GridField<T> {
        &self.0
    }
}

/// Nodewise `F_u(x, u) − f_u(x, u)ᵀ p`.
pub fn gradient_field<T: Real>(problem: &ControlProblem<T>, u: &GridField<T>, p: &GridField<T>) -> Result<GradientField<T>> {
    if u.grid() != p.grid() || u.time_grid() != p.time_grid() {
        return Err(Error::invalid("control and costate fields live on different grids"));
    }
    if p.components() != problem.state_dim || u.components() != problem.control_dim {
        return Err(Error::invalid("field component counts do not match the problem"));
    }
    let m = problem.control_dim;
    let grid = u.grid();
    let mut out = u.zeros_like(m);
    out.slices_mut().enumerate().par_bridge().for_each(|(k, slice)| {
        for node in 0..grid.len() {
            let x = grid.node_coords(node);
            let uu = u.node_vector(k, node);
            let pp = p.node_vector(k, node);
            let g = problem.cost_u(&x, &uu) - problem.f_u(&x, &uu).transpose() * pp;
            slice[node * m..(node + 1) * m].copy_from_slice(g.as_slice());
        }
    });
    Ok(GradientField(out))
}

/// Costate and gradient of `u` in one call.
pub fn gradient_of<T: Real>(problem: &ControlProblem<T>, u: &GridField<T>) -> Result<(CostateField<T>, GradientField<T>)> {
    let p = solve_costate(problem, u)?;
    let g = gradient_field(problem, u, &p)?;
    Ok((p, g))
}

/// `∫ ∇I(s, x(s))·d(s, x(s)) ds` along a trajectory.
pub fn along_trajectory_derivative<T: Real>(gradient: &GridField<T>, direction: &GridField<T>, traj: &Trajectory<T>) -> T {
    traj.simpson(|s, x, _| gradient.interpolate(s, x.as_slice()).dot(&direction.interpolate(s, x.as_slice())))
}

/// One sample of the finite-difference check.
#[derive(Clone, Debug)]
pub struct DirectionalSample<T> {
    pub index: usize,
    pub fd_value: T,
    pub adjoint_value: T,
    pub rel_err: T,
    /// Set when a perturbed flow blew up; the sample is excluded.
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct DirectionalCheck<T> {
    pub samples: Vec<DirectionalSample<T>>,
    pub worst_rel_err: T,
}

/// Samples whose derivative is below this fraction of the largest one in the
/// batch are compared against that scale instead of their own magnitude.
pub const DERIVATIVE_FLOOR: f64 = 1e-3;

/// Central difference `(I(u + εU) − I(u − εU)) / 2ε` against the adjoint
/// integral, per sample.
pub fn directional_derivative_check<T: Real>(
    problem: &ControlProblem<T>,
    u: &GridField<T>,
    direction: &GridField<T>,
    samples: &[Sample<T>],
    eps_fd: T,
) -> Result<DirectionalCheck<T>> {
    if direction.grid() != u.grid() || direction.time_grid() != u.time_grid() || direction.components() != u.components() {
        return Err(Error::invalid("direction must share the control field's grids"));
    }
    if !(eps_fd > T::zero()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (_, grad) = gradient_of(problem, u)?;
    let shifted = |sign: T| {
        let mut f = u.clone();
        for (v, d) in f.values_mut().iter_mut().zip(direction.values()) {
            *v += sign * eps_fd * *d;
        }
        f
    };
    let plus = shifted(T::one());
    let minus = shifted(-T::one());
    let raw: Vec<Option<(T, T)>> = samples
        .par_iter()
        .map(|s| {
            let base = integrate_flow(problem, u, s.t, &s.y).ok()?;
            let fp = integrate_flow(problem, &plus, s.t, &s.y).ok()?;
            let fm = integrate_flow(problem, &minus, s.t, &s.y).ok()?;
            let fd = (trajectory_cost(problem, &fp) - trajectory_cost(problem, &fm)) / (eps_fd + eps_fd);
            Some((fd, along_trajectory_derivative(&grad, direction, &base)))
        })
        .collect();
    let largest = raw
        .iter()
        .flatten()
        .fold(T::zero(), |a, &(fd, adj)| a.max(fd.abs()).max(adj.abs()));
    let floor = (largest * T::lit(DERIVATIVE_FLOOR)).max(T::lit(1e-300));
    let out: Vec<DirectionalSample<T>> = raw
        .into_iter()
        .enumerate()
        .map(|(index, r)| match r {
            Some((fd, adj)) => DirectionalSample {
                index,
                fd_value: fd,
                adjoint_value: adj,
                rel_err: (fd - adj).abs() / fd.abs().max(adj.abs()).max(floor),
                skipped: false,
            },
            None => DirectionalSample {
                index,
                fd_value: T::zero(),
                adjoint_value: T::zero(),
                rel_err: T::zero(),
                skipped: true,
            },
        })
        .collect();
    let worst_rel_err = out
        .iter()
        .filter(|s| !s.skipped)
        .fold(T::zero(), |a, s| a.max(s.rel_err));
    Ok(DirectionalCheck {
        samples: out,
        worst_rel_err,
    })
}

/// Smooth test direction with value
/// `a · exp(−|x − c|² / wₓ² − (t − t_c)² / w_t²)`, where `a` holds one
/// amplitude per component.
pub fn gaussian_bump<T: Real>(
    grid: &Grid<T>,
    time_grid: &TimeGrid<T>,
    amplitude: &[T],
    center: &[T],
    t_center: T,
    width_x: T,
    width_t: T,
) -> Result<GridField<T>> {
    if center.len() != grid.dim() || amplitude.is_empty() {
        return Err(Error::invalid("bump center or amplitude has the wrong length"));
    }
    if !(width_x > T::zero() && width_t > T::zero()) {
        return Err(Error::invalid("bump widths must be positive"));
    }
    let amp = DVector::from_column_slice(amplitude);
    Ok(GridField::from_fn(grid.clone(), time_grid.clone(), amplitude.len(), |t, x| {
        let r2 = x.iter().zip(center).fold(T::zero(), |s, (&xi, &ci)| s + (xi - ci) * (xi - ci));
        let dt = t - t_center;
        &amp * (-(r2 / (width_x * width_x)) - dt * dt / (width_t * width_t)).exp()
    }))
}

/// How the per-slice direction `U` is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectionMode {
    /// Projected Gauss–Seidel obstacle problem; update `u + ε(U − u)`.
    Obstacle,
    /// Neumann–Poisson `−ΔU + ∇I = 0`; update `u + εU`. Requires unconstrained `K`.
    Poisson,
    /// Pointwise minimizer of `F − p·f` over `K`; update `u + ε(U − u)`.
    /// The resulting field need not be regular.
    Pointwise,
}

impl DirectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DirectionMode::Obstacle => "obstacle",
            DirectionMode::Poisson => "poisson",
            DirectionMode::Pointwise => "pointwise",
        }
    }
}

#[derive(Clone, Debug)]
pub struct DescentConfig<T> {
    pub mode: DirectionMode,
    /// Stop when the stationarity residual falls to this value.
    pub tol: T,
    pub max_iter: usize,
    pub eps_max: T,
    pub eps_min: T,
    /// First trial step is `min(eps_max, eps_growth · last accepted ε)`.
    pub eps_growth: T,
    pub armijo_c1: T,
    pub backtrack: T,
    pub slice_solver: SolverSettings<T>,
    pub samples: Vec<Sample<T>>,
    /// Box over which the residual is measured; `None` means the whole grid.
    pub measure_box: Option<(Vec<T>, Vec<T>)>,
    /// Lattice resolution of the pointwise Hamiltonian scan.
    pub pointwise_resolution: usize,
    /// Mass `α` of the obstacle energy `½|∇W|² + ½α|W|²` for bounded control
    /// sets; `None` uses `(π / L)²` with `L` the largest box extent, which
    /// weighs the constant mode like the smoothest Neumann mode.
    pub obstacle_mass: Option<T>,
    /// Proximal step `τ` of the obstacle problem: the slice solve minimizes
    /// `τ ∇I·W + ½|∇W|² + ½α|W|²` over `u + W ∈ K`. Any `τ > 0` gives a
    /// feasible descent direction; `τ = 1` is the plain obstacle problem.
    pub obstacle_step: T,
}

impl<T: Real> DescentConfig<T> {
    pub fn new(mode: DirectionMode, samples: Vec<Sample<T>>) -> Self {
        DescentConfig {
            mode,
            tol: T::lit(1e-4),
            max_iter: 200,
            eps_max: if mode == DirectionMode::Poisson { T::lit(4.0) } else { T::one() },
            eps_min: T::lit(1e-8),
            eps_growth: T::lit(2.0),
            armijo_c1: T::lit(1e-4),
            backtrack: T::lit(0.5),
            slice_solver: SolverSettings::new(T::lit(1e-10), 100_000),
            samples,
            measure_box: None,
            pointwise_resolution: 21,
            obstacle_mass: None,
            obstacle_step: T::one(),
        }
    }

    /// Mass used for the obstacle slices of `grid`; zero unless the control set
    /// is constrained.
    pub fn effective_obstacle_mass(&self, problem: &ControlProblem<T>, grid: &Grid<T>) -> T {
        if self.mode != DirectionMode::Obstacle || problem.constraint.is_unconstrained() {
            return T::zero();
        }
        self.obstacle_mass.unwrap_or_else(|| {
            let extent = (0..grid.dim()).fold(T::zero(), |m, a| m.max(grid.hi()[a] - grid.lo()[a]));
            let k = T::pi() / extent;
            k * k
        })
    }

    pub fn validate(&self, problem: &ControlProblem<T>) -> Result<()> {
        let positive = [
            ("tol", self.tol),
            ("eps_max", self.eps_max),
            ("eps_min", self.eps_min),
            ("armijo_c1", self.armijo_c1),
        ];
        for (name, v) in positive {
            if !(v > T::zero() && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.eps_min > self.eps_max {
            return Err(Error::invalid("eps_min exceeds eps_max"));
        }
        if !(self.backtrack > T::zero() && self.backtrack < T::one()) {
            return Err(Error::invalid("backtrack factor must lie in (0, 1)"));
        }
        if !(self.eps_growth >= T::one()) {
            return Err(Error::invalid("eps_growth must be at least 1"));
        }
        if self.armijo_c1 >= T::one() {
            return Err(Error::invalid("armijo_c1 must be below 1"));
        }
        if self.mode != DirectionMode::Poisson && self.eps_max > T::one() {
            return Err(Error::invalid("convex-combination updates need eps_max <= 1"));
        }
        if self.mode == DirectionMode::Poisson && !problem.constraint.is_unconstrained() {
            return Err(Error::invalid("poisson mode requires an unconstrained control set"));
        }
        if self.samples.is_empty() {
            return Err(Error::invalid("descent needs at least one ensemble sample"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be positive"));
        }
        if !(self.obstacle_step > T::zero() && self.obstacle_step.is_finite()) {
            return Err(Error::invalid("obstacle_step must be positive"));
        }
        if let Some(a) = self.obstacle_mass {
            if !(a >= T::zero() && a.is_finite()) {
                return Err(Error::invalid("obstacle_mass must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescentStatus {
    Converged,
    Stalled,
    MaxIterations,
}

impl DescentStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            DescentStatus::Converged => "converged",
            DescentStatus::Stalled => "stalled",
            DescentStatus::MaxIterations => "max_iterations",
        }
    }
}

/// One row of the report. Row 0 describes the initial field.
#[derive(Clone, Debug)]
pub struct IterationRecord<T> {
    pub iter: usize,
    /// Ensemble objective after the step.
    pub objective: T,
    pub eps: T,
    /// Time integral of the per-slice `Σ V ∇I·(U − u)`.
    pub descent_inner: T,
    /// Largest per-slice inner product of the direction.
    pub max_slice_inner: T,
    /// Stationarity residual of the field after the step.
    pub residual: T,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct DescentReport<T> {
    pub records: Vec<IterationRecord<T>>,
    pub status: DescentStatus,
}

impl<T: Real> DescentReport<T> {
    pub fn final_record(&self) -> &IterationRecord<T> {
        self.records.last().expect("report has the initial row")
    }

    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }

    /// Largest increase between consecutive accepted objectives.
    pub fn max_objective_increase(&self) -> T {
        self.records
            .windows(2)
            .fold(T::zero(), |a, w| a.max(w[1].objective - w[0].objective))
    }

    /// Largest per-slice inner product over all iterations.
    pub fn max_slice_inner(&self) -> T {
        self.records
            .iter()
            .skip(1)
            .fold(T::lit(f64::NEG_INFINITY), |a, r| a.max(r.max_slice_inner))
    }
}

/// Final field with its costate, gradient and history.
#[derive(Clone, Debug)]
pub struct DescentOutcome<T> {
    pub field: GridField<T>,
    pub costate: CostateField<T>,
    pub gradient: GradientField<T>,
    pub report: DescentReport<T>,
}

fn in_box<T: Real>(x: &DVector<T>, bx: &Option<(Vec<T>, Vec<T>)>) -> bool {
    match bx {
        None => true,
        Some((lo, hi)) => x.iter().enumerate().all(|(a, &v)| v >= lo[a] && v <= hi[a]),
    }
}

/// Max `|∇I|` (unconstrained) or max `|u − P_K(u − ∇I)|` over the measured nodes.
pub fn stationarity_residual<T: Real>(
    problem: &ControlProblem<T>,
    u: &GridField<T>,
    gradient: &GridField<T>,
    measure_box: &Option<(Vec<T>, Vec<T>)>,
) -> T {
    let grid = u.grid();
    let m = u.components();
    let measured: Vec<usize> = (0..grid.len())
        .filter(|&n| in_box(&grid.node_coords(n), measure_box))
        .collect();
    let constraint = &problem.constraint;
    let mut worst = T::zero();
    let mut buf = vec![T::zero(); m];
    for k in 0..=u.time_grid().steps() {
        for &node in &measured {
            let g = gradient.node(k, node);
            let r = if constraint.is_unconstrained() {
                node_norm(g)
            } else {
                let uu = u.node(k, node);
                for i in 0..m {
                    buf[i] = uu[i] - g[i];
                }
                constraint.project_in_place(&mut buf);
                for i in 0..m {
                    buf[i] = uu[i] - buf[i];
                }
                node_norm(&buf)
            };
            worst = worst.max(r);
        }
    }
    worst
}

struct Directions<T> {
    /// `U` (Poisson) or the target field `U` of a convex update.
    target: GridField<T>,
    /// `d` with `u(ε) = u + ε d`.
    step: GridField<T>,
    slice_inner: Vec<T>,
}

fn compute_directions<T: Real>(
    problem: &ControlProblem<T>,
    config: &DescentConfig<T>,
    op: &SliceOperator<T>,
    u: &GridField<T>,
    costate: &GridField<T>,
    gradient: &GridField<T>,
    warm: Option<&GridField<T>>,
) -> Result<Directions<T>> {
    let grid = u.grid();
    let m = u.components();
    let steps = u.time_grid().steps();
    let per_slice: Vec<Result<(Vec<T>, T)>> = (0..=steps)
        .into_par_iter()
        .map(|k| {
            let g = gradient.slice(k);
            let uk = u.slice(k);
            match config.mode {
                DirectionMode::Poisson => {
                    let sol = poisson_direction(op, g, &config.slice_solver)?;
                    let inner = sol
                        .u_slice
                        .iter()
                        .zip(g)
                        .enumerate()
                        .fold(T::zero(), |s, (i, (&d, &gv))| s + op.weights()[i / m] * gv * d);
                    Ok((sol.u_slice, inner))
                }
                DirectionMode::Obstacle => {
                    let scaled: Vec<T>;
                    let g_step = if config.obstacle_step == T::one() {
                        g
                    } else {
                        scaled = g.iter().map(|&v| v * config.obstacle_step).collect();
                        &scaled
                    };
                    let sol = solve_obstacle_slice_from(
                        op,
                        g_step,
                        uk,
                        &problem.constraint,
                        &config.slice_solver,
                        warm.map(|w| w.slice(k)),
                    )?;
                    let inner = crate::obstacle::descent_inner_product(op, g, &sol.u_slice, uk)?;
                    Ok((sol.u_slice, inner))
                }
                DirectionMode::Pointwise => {
                    let mut target = vec![T::zero(); uk.len()];
                    for node in 0..grid.len() {
                        let x = grid.node_coords(node);
                        let p = costate.node_vector(k, node);
                        let (_, v) =
                            hamiltonian_argmin(problem, &p, &x, config.pointwise_resolution, CostateSign::Minus)?;
                        target[node * m..(node + 1) * m].copy_from_slice(v.as_slice());
                    }
                    let inner = crate::obstacle::descent_inner_product(op, g, &target, uk)?;
                    Ok((target, inner))
                }
            }
        })
        .collect();
    let mut target = u.zeros_like(m);
    let mut step = u.zeros_like(m);
    let mut slice_inner = Vec::with_capacity(steps + 1);
    for (k, r) in per_slice.into_iter().enumerate() {
        let (t, inner) = r?;
        if config.mode == DirectionMode::Poisson {
            step.slice_mut(k).copy_from_slice(&t);
        } else {
            for ((d, &tv), &uv) in step.slice_mut(k).iter_mut().zip(&t).zip(u.slice(k)) {
                *d = tv - uv;
            }
        }
        target.slice_mut(k).copy_from_slice(&t);
        slice_inner.push(inner);
    }
    Ok(Directions {
        target,
        step,
        slice_inner,
    })
}

fn trial_field<T: Real>(
    problem: &ControlProblem<T>,
    mode: DirectionMode,
    u: &GridField<T>,
    dirs: &Directions<T>,
    eps: T,
) -> GridField<T> {
    if mode != DirectionMode::Poisson && eps == T::one() {
        return dirs.target.clone();
    }
    let mut out = u.clone();
    for (v, &d) in out.values_mut().iter_mut().zip(dirs.step.values()) {
        *v += eps * d;
    }
    if !problem.constraint.is_unconstrained() {
        let m = u.components();
        for chunk in out.values_mut().chunks_mut(m) {
            problem.constraint.project_in_place(chunk);
        }
    }
    out
}

fn time_integral<T: Real>(u: &GridField<T>, per_slice: &[T]) -> T {
    let tg = u.time_grid();
    let half = T::lit(0.5);
    (0..tg.steps()).fold(T::zero(), |s, k| {
        s + (tg.time(k + 1) - tg.time(k)) * half * (per_slice[k] + per_slice[k + 1])
    })
}

/// Iterates costate → gradient → direction → line-searched update from `u0`.
pub fn run_descent<T: Real>(problem: &ControlProblem<T>, config: &DescentConfig<T>, u0: GridField<T>) -> Result<DescentOutcome<T>> {
    config.validate(problem)?;
    if u0.components() != problem.control_dim || u0.grid().dim() != problem.state_dim {
        return Err(Error::invalid("initial field does not match the problem dimensions"));
    }
    let m = problem.control_dim;
    if !u0.values().chunks(m).all(|c| problem.constraint.contains(c)) {
        return Err(Error::invalid("initial field leaves the control set"));
    }
    let clock = Instant::now();
    let op = SliceOperator::new(u0.grid()).with_mass(config.effective_obstacle_mass(problem, u0.grid()))?;
    let mut u = u0;
    let mut trajs = ensemble_trajectories(problem, &u, &config.samples)?;
    let mut objective = mean_cost(problem, &trajs);
    let (mut costate, mut gradient) = gradient_of(problem, &u)?;
    let mut residual = stationarity_residual(problem, &u, &gradient, &config.measure_box);
    let mut records = vec![IterationRecord {
        iter: 0,
        objective,
        eps: T::zero(),
        descent_inner: T::zero(),
        max_slice_inner: T::zero(),
        residual,
        seconds: clock.elapsed().as_secs_f64(),
    }];
    log::info!("descent start: objective {objective:e}, residual {residual:e}");
    let mut last_eps = config.eps_max;
    let mut warm: Option<GridField<T>> = None;
    let mut status = DescentStatus::MaxIterations;

    if residual <= config.tol {
        status = DescentStatus::Converged;
    } else {
        for iter in 1..=config.max_iter {
            let dirs = compute_directions(problem, config, &op, &u, &costate, &gradient, warm.as_ref())?;
            let slope_terms: Vec<T> = trajs
                .par_iter()
                .map(|tr| along_trajectory_derivative(&gradient, &dirs.step, tr))
                .collect();
            let slope = slope_terms.iter().fold(T::zero(), |s, &v| s + v) / T::from_count(slope_terms.len());
            let slope = slope.min(T::zero());

            let mut eps = config.eps_max.min(last_eps * config.eps_growth);
            let accepted = loop {
                if eps < config.eps_min {
                    break None;
                }
                let trial = trial_field(problem, config.mode, &u, &dirs, eps);
                if let Ok(tr) = ensemble_trajectories(problem, &trial, &config.samples) {
                    let j = mean_cost(problem, &tr);
                    if j.is_finite() && j <= objective + config.armijo_c1 * eps * slope {
                        break Some((trial, tr, j));
                    }
                }
                eps *= config.backtrack;
            };
            let Some((trial, tr, j)) = accepted else {
                status = DescentStatus::Stalled;
                log::warn!("descent stalled at iteration {iter}: no step above eps_min decreases the objective");
                break;
            };
            u = trial;
            trajs = tr;
            objective = j;
            last_eps = eps;
            if config.mode == DirectionMode::Obstacle {
                warm = Some(dirs.target);
            }
            let (p, g) = gradient_of(problem, &u)?;
            costate = p;
            gradient = g;
            residual = stationarity_residual(problem, &u, &gradient, &config.measure_box);
            let max_slice_inner = dirs
                .slice_inner
                .iter()
                .fold(T::lit(f64::NEG_INFINITY), |a, &b| a.max(b));
            records.push(IterationRecord {
                iter,
                objective,
                eps,
                descent_inner: time_integral(&u, &dirs.slice_inner),
                max_slice_inner,
                residual,
                seconds: clock.elapsed().as_secs_f64(),
            });
            log::debug!("iter {iter}: objective {objective:e}, eps {eps:e}, residual {residual:e}");
            if residual <= config.tol {
                status = DescentStatus::Converged;
                break;
            }
        }
    }
    log::info!(
        "descent {}: {} iterations, objective {objective:e}, residual {residual:e}",
        status.as_str(),
        records.len() - 1
    );
    Ok(DescentOutcome {
        field: u,
        costate,
        gradient,
        report: DescentReport { records, status },
    })
}
