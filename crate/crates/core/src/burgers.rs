//! Backward Burgers problem `u_t + u u_x = 0`, `u(T, x) = f(x)`, solved by
//! exact characteristics.
//!
//! A characteristic through `(t, x)` starts at the terminal foot `ξ` with
//! `x = ξ + (t − T) f(ξ)`, and `u(t, x) = f(ξ)`. The map `ξ ↦ x` stays
//! strictly increasing while `1 − (T − t) f′ > 0`, so the classical solution
//! lives on `t > T − 1 / sup f′`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{integrate_flow, Sample, Trajectory};
use crate::grid::{Grid, GridField, TimeGrid};
use crate::problem::{velocity_problem, ScalarMap};
use crate::scalar::Real;

/// Where the bound on `sup f′` came from.
#[derive(Clone, Debug, PartialEq)]
pub enum SlopeBound<T> {
    /// Supplied by the caller.
    Analytic(T),
    /// Maximum of `f′` over `samples` equispaced points of `[lo, hi]`.
    Sampled { value: T, lo: T, hi: T, samples: usize },
}

impl<T: Real> SlopeBound<T> {
    pub fn value(&self) -> T {
        match self {
            SlopeBound::Analytic(v) => *v,
            SlopeBound::Sampled { value, .. } => *value,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BurgersSolution<T> {
    terminal: ScalarMap<T>,
    horizon: T,
    slope: SlopeBound<T>,
    blowup_time: Option<T>,
}

impl<T: Real> BurgersSolution<T> {
    /// Uses a known upper bound `sup_slope ≥ sup f′`.
    pub fn with_slope_bound(terminal: ScalarMap<T>, horizon: T, sup_slope: T) -> Result<Self> {
        Self::build(terminal, horizon, SlopeBound::Analytic(sup_slope))
    }

    /// Estimates `sup f′` by dense sampling of `[lo, hi]`.
    pub fn sampled(terminal: ScalarMap<T>, horizon: T, lo: T, hi: T, samples: usize) -> Result<Self> {
        if !(lo < hi) || samples < 2 {
            return Err(Error::invalid("slope sampling needs lo < hi and at least two samples"));
        }
        let step = (hi - lo) / T::from_count(samples - 1);
        let mut value = terminal.derivative(lo);
        for i in 0..samples {
            let d = terminal.derivative(lo + step * T::from_count(i));
            if !d.is_finite() {
                return Err(Error::invalid("terminal data derivative is not finite"));
            }
            value = value.max(d);
        }
        Self::build(terminal, horizon, SlopeBound::Sampled { value, lo, hi, samples })
    }

    fn build(terminal: ScalarMap<T>, horizon: T, slope: SlopeBound<T>) -> Result<Self> {
        if !(horizon.is_finite() && slope.value().is_finite()) {
            return Err(Error::invalid("horizon and slope bound must be finite"));
        }
        let m = slope.value();
        let blowup_time = (m > T::zero()).then(|| horizon - T::one() / m);
        Ok(Self {
            terminal,
            horizon,
            slope,
            blowup_time,
        })
    }

    pub fn terminal(&self) -> &ScalarMap<T> {
        &self.terminal
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn slope_bound(&self) -> &SlopeBound<T> {
        &self.slope
    }

    /// `T − 1 / sup f′` when `sup f′ > 0`.
    pub fn blowup_time(&self) -> Option<T> {
        self.blowup_time
    }

    pub fn is_classical(&self, t: T) -> bool {
        t <= self.horizon && self.blowup_time.map_or(true, |b| t > b)
    }

    /// Terminal foot `ξ` of the characteristic through `(t, x)`.
    pub fn foot(&self, t: T, x: T, newton: NewtonSettings<T>) -> Result<T> {
        if t > self.horizon || !t.is_finite() || !x.is_finite() {
            return Err(Error::invalid(format!("evaluation point ({t}, {x}) outside (−∞, T]")));
        }
        if let Some(b) = self.blowup_time {
            if t <= b {
                return Err(Error::OutsideClassicalRegime {
                    t: t.as_f64(),
                    blowup: b.as_f64(),
                });
            }
        }
        let tau = self.horizon - t;
        if tau == T::zero() {
            return Ok(x);
        }
        let f = &self.terminal;
        let phi = |xi: T| xi - tau * f.value(xi) - x;
        let fail = || Error::InversionFailed {
            t: t.as_f64(),
            x: x.as_f64(),
        };

        let guess = x + tau * f.value(x);
        let mut width = T::one().max((tau * f.value(x)).abs());
        let (mut a, mut b) = (guess - width, guess + width);
        let mut bracketed = false;
        for _ in 0..80 {
            let (pa, pb) = (phi(a), phi(b));
            if !(pa.is_finite() && pb.is_finite()) {
                return Err(fail());
            }
            if pa <= T::zero() && pb >= T::zero() {
                bracketed = true;
                break;
            }
            width *= T::lit(2.0);
            a = guess - width;
            b = guess + width;
        }
        if !bracketed {
            return Err(fail());
        }

        let mut xi = guess;
        for _ in 0..newton.max_iter {
            let r = phi(xi);
            if r.abs() <= newton.tol {
                return Ok(xi);
            }
            if r < T::zero() {
                a = xi;
            } else {
                b = xi;
            }
            let slope = T::one() - tau * f.derivative(xi);
            let candidate = xi - r / slope;
            xi = if slope > T::zero() && candidate > a && candidate < b {
                candidate
            } else {
                (a + b) * T::lit(0.5)
            };
            if b - a <= T::eps() * (T::one() + xi.abs()) {
                return if phi(xi).abs() <= newton.tol { Ok(xi) } else { Err(fail()) };
            }
        }
        Err(fail())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonSettings<T> {
    /// Bound on the characteristic equation residual `|ξ + (t − T) f(ξ) − x|`.
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> NewtonSettings<T> {
    pub fn new(tol: T, max_iter: usize) -> Self {
        Self { tol, max_iter }
    }
}

impl<T: Real> Default for NewtonSettings<T> {
    /// A few hundred ulps of residual and 100 iterations.
    fn default() -> Self {
        Self {
            tol: T::eps() * T::lit(256.0),
            max_iter: 100,
        }
    }
}

/// `u(t, x) = f(ξ)` on the characteristic through `(t, x)`.
pub fn burgers_eval<T: Real>(sol: &BurgersSolution<T>, t: T, x: T, newton: NewtonSettings<T>) -> Result<T> {
    let xi = sol.foot(t, x, newton)?;
    Ok(sol.terminal.value(xi))
}

/// `|u_t + u u_x|` by central differences of step `h`.
pub fn burgers_residual<T: Real>(
    sol: &BurgersSolution<T>,
    t: T,
    x: T,
    h: T,
    newton: NewtonSettings<T>,
) -> Result<T> {
    if !(h > T::zero()) || t + h > sol.horizon {
        return Err(Error::invalid("finite-difference stencil leaves (−∞, T]"));
    }
    let eval = |s: T, y: T| burgers_eval(sol, s, y, newton);
    let two_h = h * T::lit(2.0);
    let u = eval(t, x)?;
    let ut = (eval(t + h, x)? - eval(t - h, x)?) / two_h;
    let ux = (eval(t, x + h)? - eval(t, x - h)?) / two_h;
    Ok((ut + u * ux).abs())
}

/// Samples `u` at every node; slices at or before the blow-up time and nodes
/// whose inversion fails hold NaN.
pub fn burgers_field<T: Real>(
    sol: &BurgersSolution<T>,
    grid: &Grid<T>,
    time_grid: &TimeGrid<T>,
    newton: NewtonSettings<T>,
) -> Result<GridField<T>> {
    if grid.dim() != 1 {
        return Err(Error::invalid("Burgers field needs a one-dimensional grid"));
    }
    let mut field = GridField::zeros(grid.clone(), time_grid.clone(), 1);
    let len = field.slice_len();
    field.values_mut().par_chunks_mut(len).enumerate().for_each(|(k, slice)| {
        let t = time_grid.time(k);
        for (node, v) in slice.iter_mut().enumerate() {
            *v = burgers_eval(sol, t, grid.coord(0, node), newton).unwrap_or(T::lit(f64::NAN));
        }
    });
    Ok(field)
}

/// Residuals of the Euler–Lagrange system `x″ = 0`, `x′(T) = f(x(T))` along
/// one closed-loop trajectory of the Burgers field.
#[derive(Clone, Debug, PartialEq)]
pub struct AcademicCheck<T> {
    pub start: Sample<T>,
    /// `None` when the trajectory meets the non-classical region.
    pub residuals: Option<AcademicResiduals<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcademicResiduals<T> {
    /// Largest second divided difference of the state.
    pub euler_lagrange: T,
    /// `|x′(T) − f(x(T))|` with a second-order one-sided difference.
    pub terminal: T,
}

#[derive(Clone, Debug)]
pub struct AcademicReport<T> {
    pub blowup_time: Option<T>,
    pub checks: Vec<AcademicCheck<T>>,
    pub max_euler_lagrange: T,
    pub max_terminal: T,
    pub field: GridField<T>,
}

impl<T: Real> AcademicReport<T> {
    pub fn affected(&self) -> usize {
        self.checks.iter().filter(|c| c.residuals.is_none()).count()
    }
}

/// Integrates `x′ = u(t, x)` on the sampled Burgers field from each start and
/// checks the Euler–Lagrange system of the academic problem.
///
/// `sup f′` is estimated over the grid box with 64 samples per cell.
pub fn verify_academic_feedback<T: Real>(
    drift: &ScalarMap<T>,
    horizon: T,
    grid: &Grid<T>,
    time_grid: &TimeGrid<T>,
    starts: &[Sample<T>],
    newton: NewtonSettings<T>,
) -> Result<AcademicReport<T>> {
    if grid.dim() != 1 {
        return Err(Error::invalid("academic check needs a one-dimensional grid"));
    }
    if (time_grid.t_final() - horizon).abs() > T::eps() * T::lit(16.0) * (T::one() + horizon.abs()) {
        return Err(Error::invalid("time grid must end at the horizon"));
    }
    let samples = (grid.nodes_per_axis()[0] - 1) * 64 + 1;
    let sol = BurgersSolution::sampled(drift.clone(), horizon, grid.lo()[0], grid.hi()[0], samples)?;
    let field = burgers_field(&sol, grid, time_grid, newton)?;
    let velocity = velocity_problem(1, horizon)?;

    let checks: Vec<AcademicCheck<T>> = starts
        .par_iter()
        .map(|s| {
            let (k, _) = time_grid.locate(s.t);
            let reachable = sol.is_classical(time_grid.time(k)) && s.y.len() == 1;
            let residuals = if reachable {
                integrate_flow(&velocity, &field, s.t, &s.y)
                    .ok()
                    .and_then(|tr| trajectory_residuals(drift, &tr))
            } else {
                None
            };
            AcademicCheck {
                start: s.clone(),
                residuals,
            }
        })
        .collect();

    let fold = |pick: fn(&AcademicResiduals<T>) -> T| {
        checks
            .iter()
            .filter_map(|c| c.residuals.as_ref().map(pick))
            .fold(T::zero(), |m, v| m.max(v))
    };
    let max_euler_lagrange = fold(|r| r.euler_lagrange);
    let max_terminal = fold(|r| r.terminal);
    Ok(AcademicReport {
        blowup_time: sol.blowup_time(),
        checks,
        max_euler_lagrange,
        max_terminal,
        field,
    })
}

fn trajectory_residuals<T: Real>(drift: &ScalarMap<T>, tr: &Trajectory<T>) -> Option<AcademicResiduals<T>> {
    let n = tr.times.len();
    if n < 3 || tr.states.iter().any(|x| !x[0].is_finite()) {
        return None;
    }
    let x = |k: usize| tr.states[k][0];
    let two = T::lit(2.0);
    let mut el = T::zero();
    for k in 1..n - 1 {
        let h1 = tr.times[k] - tr.times[k - 1];
        let h2 = tr.times[k + 1] - tr.times[k];
        let second = two * ((x(k + 1) - x(k)) / h2 - (x(k) - x(k - 1)) / h1) / (h1 + h2);
        el = el.max(second.abs());
    }
    // one-sided three-point derivative on possibly unequal steps
    let (t0, t1, t2) = (tr.times[n - 3], tr.times[n - 2], tr.times[n - 1]);
    let (a, b) = (t2 - t1, t2 - t0);
    let dx = -x(n - 3) * (a / ((t0 - t1) * b)) - x(n - 2) * (b / ((t1 - t0) * a)) + x(n - 1) * ((a + b) / (a * b));
    let terminal = (dx - drift.value(x(n - 1))).abs();
    Some(AcademicResiduals {
        euler_lagrange: el,
        terminal,
    })
}

/// Closed-form `u` for linear terminal data `f(x) = c·x`: `c x / (1 − c (T − t))`.
pub fn linear_data_solution<T: Real>(c: T, horizon: T, t: T, x: T) -> T {
    c * x / (T::one() - c * (horizon - t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tight() -> NewtonSettings<f64> {
        NewtonSettings::new(1e-13, 100)
    }

    #[test]
    fn constant_data_is_transported_unchanged() {
        let sol = BurgersSolution::sampled(ScalarMap::constant(0.7), 1.0, -3.0, 3.0, 101).unwrap();
        assert_eq!(sol.blowup_time(), None);
        for &(t, x) in &[(0.0, 0.0), (0.3, -2.5), (0.99, 10.0)] {
            assert_abs_diff_eq!(burgers_eval(&sol, t, x, tight()).unwrap(), 0.7, epsilon = 1e-15);
        }
        assert!(burgers_residual(&sol, 0.5, 0.2, 1e-4, tight()).unwrap() < 1e-12);
    }

    #[test]
    fn identity_data_has_x_over_t() {
        let sol = BurgersSolution::sampled(ScalarMap::identity(), 1.0, -2.0, 2.0, 401).unwrap();
        assert_abs_diff_eq!(sol.blowup_time().unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(burgers_eval(&sol, 0.5, 1.0, tight()).unwrap(), 2.0, epsilon = 1e-10);
        for &(t, x) in &[(0.1, -1.0), (0.25, 0.4), (0.9, 3.0)] {
            assert_abs_diff_eq!(burgers_eval(&sol, t, x, tight()).unwrap(), x / t, epsilon = 1e-10);
        }
        assert!(matches!(
            burgers_eval(&sol, 0.0, 1.0, tight()),
            Err(Error::OutsideClassicalRegime { .. })
        ));
        assert!(burgers_residual(&sol, 0.5, 0.7, 1e-4, tight()).unwrap() < 1e-6);
    }

    #[test]
    fn negated_identity_has_no_blowup() {
        let sol = BurgersSolution::sampled(ScalarMap::linear(-1.0, 0.0), 1.0, -2.0, 2.0, 401).unwrap();
        assert_eq!(sol.blowup_time(), None);
        assert_abs_diff_eq!(burgers_eval(&sol, 0.0, 1.0, tight()).unwrap(), -0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(
            burgers_eval(&sol, -3.0, 0.8, tight()).unwrap(),
            linear_data_solution(-1.0, 1.0, -3.0, 0.8),
            epsilon = 1e-10
        );
    }

    #[test]
    fn analytic_bound_sets_blowup() {
        let sol = BurgersSolution::with_slope_bound(ScalarMap::sine(1.0, 1.0), 2.0, 1.0).unwrap();
        assert_abs_diff_eq!(sol.blowup_time().unwrap(), 1.0, epsilon = 1e-15);
        assert!(sol.is_classical(1.5) && !sol.is_classical(1.0));
    }

    #[test]
    fn residual_shrinks_quadratically_in_the_step() {
        let sol = BurgersSolution::sampled(ScalarMap::sine(0.5, 1.0), 1.0, -4.0, 4.0, 2001).unwrap();
        let r1 = burgers_residual(&sol, 0.4, 0.9, 1e-2, tight()).unwrap();
        let r2 = burgers_residual(&sol, 0.4, 0.9, 5e-3, tight()).unwrap();
        assert!(r1 > 0.0 && r1 / r2 > 3.5 && r1 / r2 < 4.5, "{r1} {r2}");
    }

    #[test]
    fn evaluation_after_horizon_is_rejected() {
        let sol = BurgersSolution::sampled(ScalarMap::identity(), 1.0, -1.0, 1.0, 11).unwrap();
        assert!(matches!(burgers_eval(&sol, 1.1, 0.0, tight()), Err(Error::InvalidInput(_))));
        assert_eq!(burgers_eval(&sol, 1.0, 0.3, tight()).unwrap(), 0.3);
    }

    #[test]
    fn academic_zero_drift_keeps_states_fixed() {
        let grid: Grid<f64> = Grid::uniform(1, -1.0, 1.0, 21).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let starts = crate::flow::sample_lattice(&[-1.0], &[1.0], &[5], &[0.0, 0.5]).unwrap();
        let rep = verify_academic_feedback(&ScalarMap::constant(0.0), 1.0, &grid, &tg, &starts, tight()).unwrap();
        assert_eq!(rep.affected(), 0);
        // difference weights of size 1/dt² leave rounding only
        assert!(rep.max_euler_lagrange < 1e-10);
        assert!(rep.max_terminal < 1e-10);
    }

    #[test]
    fn academic_damped_drift_meets_terminal_condition() {
        let grid: Grid<f64> = Grid::uniform(1, -1.0, 1.0, 41).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let starts = crate::flow::sample_lattice(&[-1.0], &[1.0], &[9], &[0.0]).unwrap();
        let rep =
            verify_academic_feedback(&ScalarMap::linear(-1.0, 0.0), 1.0, &grid, &tg, &starts, tight()).unwrap();
        assert_eq!(rep.affected(), 0);
        assert!(rep.max_terminal <= 1e-4, "{}", rep.max_terminal);
        // x(t) = y (2 − t) / 2 is a straight line
        let tr = integrate_flow(&velocity_problem(1, 1.0).unwrap(), &rep.field, 0.0, &DVector::from_element(1, 0.5))
            .unwrap();
        assert_abs_diff_eq!(tr.final_state()[0], 0.25, epsilon = 1e-6);
    }

    #[test]
    fn academic_blowup_marks_early_starts() {
        let grid: Grid<f64> = Grid::uniform(1, -1.0, 1.0, 21).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let starts = vec![Sample::new(0.0, vec![0.5]), Sample::new(0.5, vec![0.5])];
        // f(x) = 2x blows up at T − 1/2
        let rep =
            verify_academic_feedback(&ScalarMap::linear(2.0, 0.0), 1.0, &grid, &tg, &starts, tight()).unwrap();
        assert_abs_diff_eq!(rep.blowup_time.unwrap(), 0.5, epsilon = 1e-12);
        assert!(rep.checks[0].residuals.is_none());
        assert!(rep.checks[1].residuals.is_none());
        let late = vec![Sample::new(0.6, vec![0.1])];
        let rep = verify_academic_feedback(&ScalarMap::linear(2.0, 0.0), 1.0, &grid, &tg, &late, tight()).unwrap();
        assert_eq!(rep.affected(), 0);
    }

    #[test]
    fn euler_lagrange_residual_shrinks_under_refinement() {
        let drift = ScalarMap::sine(0.5, 1.0);
        let starts = crate::flow::sample_lattice(&[-0.5], &[0.5], &[5], &[0.0]).unwrap();
        let run = |nodes: usize, steps: usize| {
            let grid: Grid<f64> = Grid::uniform(1, -2.0, 2.0, nodes).unwrap();
            let tg = TimeGrid::new(0.0, 1.0, steps).unwrap();
            verify_academic_feedback(&drift, 1.0, &grid, &tg, &starts, tight())
                .unwrap()
                .max_euler_lagrange
        };
        let coarse = run(41, 50);
        let fine = run(81, 100);
        assert!(coarse / fine > 1.8, "{coarse} {fine}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn constant_along_characteristics(xi in -2.0f64..2.0, t in 0.05f64..1.0, c in -1.5f64..0.9) {
            let f = ScalarMap::new("lin+sin", move |x: f64| c * x + 0.1 * x.sin(), move |x: f64| c + 0.1 * x.cos());
            let sol = BurgersSolution::with_slope_bound(f.clone(), 1.0, c + 0.1).unwrap();
            prop_assume!(sol.is_classical(t));
            let x = xi + (t - 1.0) * f.value(xi);
            let u = burgers_eval(&sol, t, x, tight()).unwrap();
            prop_assert!((u - f.value(xi)).abs() <= 1e-10);
        }

        #[test]
        fn monotone_for_increasing_data(t in 0.3f64..1.0, x in -2.0f64..2.0, dx in 1e-3f64..1.0) {
            let f = ScalarMap::new("atan", |x: f64| x.atan(), |x: f64| 1.0 / (1.0 + x * x));
            let sol = BurgersSolution::with_slope_bound(f, 1.0, 1.0).unwrap();
            let a = burgers_eval(&sol, t, x, tight()).unwrap();
            let b = burgers_eval(&sol, t, x + dx, tight()).unwrap();
            prop_assert!(b >= a);
        }
    }
}
