//! Independent reference computations: the velocity integrand `φ`, the
//! pointwise Hamiltonian minimizer and a brute-force dynamic-programming
//! solver on small grids.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::integrate_flow;
use crate::grid::{Grid, GridField, TimeGrid};
use crate::problem::{ConstraintSet, ControlProblem};
use crate::scalar::Real;

/// Finite list of admissible controls scanned by the oracles.
#[derive(Clone, Debug)]
pub struct ControlGrid<T: Real> {
    points: Vec<DVector<T>>,
}

impl<T: Real> ControlGrid<T> {
    pub fn from_points(points: Vec<DVector<T>>) -> Result<Self> {
        let m = points.first().map(|p| p.len()).unwrap_or(0);
        if m == 0 || points.iter().any(|p| p.len() != m) {
            return Err(Error::invalid("control grid needs points of one positive dimension"));
        }
        Ok(ControlGrid { points })
    }

    /// Tensor lattice with `resolution` points per axis, endpoints included.
    pub fn uniform_box(lo: &[T], hi: &[T], resolution: usize) -> Result<Self> {
        if resolution < 2 || lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::invalid("control lattice needs resolution >= 2 and matching bounds"));
        }
        let collapsed: Vec<bool> = lo.iter().zip(hi).map(|(l, h)| h <= l).collect();
        let mut points = Vec::new();
        let count = resolution.pow(lo.len() as u32);
        let mut idx = vec![0usize; lo.len()];
        for flat in 0..count {
            let mut r = flat;
            for a in (0..lo.len()).rev() {
                idx[a] = r % resolution;
                r /= resolution;
            }
            if collapsed.iter().zip(&idx).any(|(&c, &i)| c && i > 0) {
                continue;
            }
            let p = DVector::from_fn(lo.len(), |a, _| {
                if collapsed[a] {
                    lo[a]
                } else if idx[a] + 1 == resolution {
                    hi[a]
                } else {
                    lo[a] + (hi[a] - lo[a]) * T::from_count(idx[a]) / T::from_count(resolution - 1)
                }
            });
            points.push(p);
        }
        Self::from_points(points)
    }

    /// Lattice over `K`; unconstrained sets need a search box.
    pub fn for_constraint(
        constraint: &ConstraintSet<T>,
        control_dim: usize,
        resolution: usize,
        search_box: Option<(&[T], &[T])>,
    ) -> Result<Self> {
        match constraint {
            ConstraintSet::Box { lo, hi } => Self::uniform_box(lo.as_slice(), hi.as_slice(), resolution),
            ConstraintSet::Ball { center, radius } => {
                let lo: Vec<T> = center.iter().map(|&c| c - *radius).collect();
                let hi: Vec<T> = center.iter().map(|&c| c + *radius).collect();
                let full = Self::uniform_box(&lo, &hi, resolution)?;
                let mut points: Vec<DVector<T>> =
                    full.points.into_iter().filter(|p| constraint.contains(p.as_slice())).collect();
                points.push(center.clone());
                Self::from_points(points)
            }
            ConstraintSet::Unconstrained => {
                let (lo, hi) = search_box.ok_or_else(|| Error::invalid("unconstrained control grid needs a search box"))?;
                if lo.len() != control_dim {
                    return Err(Error::invalid("search box dimension mismatch"));
                }
                Self::uniform_box(lo, hi, resolution)
            }
        }
    }

    pub fn points(&self) -> &[DVector<T>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
}

/// Which Hamiltonian is minimized: `F + p·f` or `F − p·f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostateSign {
    Plus,
    Minus,
}

impl CostateSign {
    fn factor<T: Real>(self) -> T {
        match self {
            CostateSign::Plus => T::one(),
            CostateSign::Minus => -T::one(),
        }
    }
}

const POLISH_ITER: usize = 2000;

/// Projected gradient with backtracking from `start`.
fn polish<T: Real>(
    value: &dyn Fn(&DVector<T>) -> T,
    grad: &dyn Fn(&DVector<T>) -> DVector<T>,
    project: &dyn Fn(&mut DVector<T>),
    start: DVector<T>,
    detect_unbounded: bool,
) -> Result<(T, DVector<T>)> {
    let mut v = start;
    project(&mut v);
    let mut fv = value(&v);
    let mut step = T::one();
    let c1 = T::lit(1e-4);
    let tiny = T::eps() * T::lit(16.0);
    for _ in 0..POLISH_ITER {
        let g = grad(&v);
        let mut s = step * T::lit(2.0);
        let (cand, fc) = loop {
            let mut c = &v - &g * s;
            project(&mut c);
            let fc = value(&c);
            let moved = (&c - &v).norm_squared();
            if fc <= fv - c1 * moved / s || moved == T::zero() {
                break (c, fc);
            }
            s *= T::lit(0.5);
            if s < T::lit(1e-20) {
                return Ok((fv, v));
            }
        };
        let moved = (&cand - &v).norm();
        v = cand;
        fv = fc;
        step = s;
        if detect_unbounded && (v.norm() > T::lit(1e8) || !fv.is_finite()) {
            return Err(Error::Unbounded);
        }
        if moved <= tiny * (T::one() + v.norm()) {
            break;
        }
    }
    Ok((fv, v))
}

/// `min_{u ∈ K} F(x, u) ± p·f(x, u)`: lattice scan over `K` followed by a
/// projected-gradient polish. Unconstrained sets start from `u = 0` and report
/// [`Error::Unbounded`] when the iterates escape.
pub fn hamiltonian_argmin<T: Real>(
    problem: &ControlProblem<T>,
    p: &DVector<T>,
    x: &DVector<T>,
    resolution: usize,
    sign: CostateSign,
) -> Result<(T, DVector<T>)> {
    let s: T = sign.factor();
    let m = problem.control_dim;
    let value = |u: &DVector<T>| problem.cost(x, u) + s * p.dot(&problem.f(x, u));
    let grad = |u: &DVector<T>| problem.cost_u(x, u) + problem.f_u(x, u).transpose() * p * s;
    let constraint = &problem.constraint;
    let project = |u: &mut DVector<T>| constraint.project_in_place(u.as_mut_slice());
    if constraint.is_unconstrained() {
        return polish(&value, &grad, &project, DVector::zeros(m), true);
    }
    let lattice = ControlGrid::for_constraint(constraint, m, resolution, None)?;
    let mut best = (value(&lattice.points[0]), 0);
    for (i, u) in lattice.points.iter().enumerate().skip(1) {
        let v = value(u);
        if v < best.0 {
            best = (v, i);
        }
    }
    let (fv, u) = polish(&value, &grad, &project, lattice.points[best.1].clone(), false)?;
    if fv <= best.0 {
        Ok((fv, u))
    } else {
        Ok((best.0, lattice.points[best.1].clone()))
    }
}

/// Value of `φ(x, ξ)`; `Infeasible` stands for `+∞`.
#[derive(Clone, Debug)]
pub enum PhiValue<T: Real> {
    Finite {
        value: T,
        argmin: DVector<T>,
        /// Best value over the control lattice restricted to the constraint.
        brute_force: Option<T>,
    },
    Infeasible,
}

impl<T: Real> PhiValue<T> {
    pub fn value(&self) -> T {
        match self {
            PhiValue::Finite { value, .. } => *value,
            PhiValue::Infeasible => T::lit(f64::INFINITY),
        }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self, PhiValue::Infeasible)
    }
}

/// `φ(x, ξ) = min { F(x, u) : u ∈ K, f(x, u) = ξ }` for control-affine dynamics.
pub fn phi_eval<T: Real>(problem: &ControlProblem<T>, x: &DVector<T>, xi: &DVector<T>, resolution: usize) -> Result<PhiValue<T>> {
    let n = problem.state_dim;
    let m = problem.control_dim;
    if x.len() != n || xi.len() != n {
        return Err(Error::invalid("phi: state dimension mismatch"));
    }
    let zero = DVector::zeros(m);
    let a = problem.f(x, &zero);
    let b = problem.f_u(x, &zero);
    // affine check at a few deterministic probes
    for probe in 0..3 {
        let u = DVector::from_fn(m, |i, _| T::lit(((i + 1) * (probe + 2)) as f64 * 0.37).sin());
        let lin = &a + &b * &u;
        let got = problem.f(x, &u);
        if (&got - &lin).amax() > T::lit(1e-8) * (T::one() + lin.amax()) {
            return Err(Error::invalid("phi requires control-affine dynamics"));
        }
    }
    let svd = b.clone().svd(true, true);
    let (uu, vt) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
    let smax = svd.singular_values.amax();
    let cut = smax * T::lit(1e-10);
    let rank = svd.singular_values.iter().filter(|&&s| s > cut).count();
    let rhs = xi - &a;
    // particular solution by the pseudo-inverse
    let mut v0 = DVector::zeros(m);
    for k in 0..svd.singular_values.len() {
        let s = svd.singular_values[k];
        if s > cut {
            let coef = uu.column(k).dot(&rhs) / s;
            v0 += vt.row(k).transpose() * coef;
        }
    }
    let scale = T::one() + rhs.amax();
    if (&b * &v0 - &rhs).amax() > T::lit(1e-9) * scale {
        return Ok(PhiValue::Infeasible);
    }
    // null-space basis: remaining right singular vectors
    let null: Vec<DVector<T>> = (0..m)
        .filter(|&k| k >= svd.singular_values.len() || svd.singular_values[k] <= cut)
        .map(|k| {
            if k < vt.nrows() {
                vt.row(k).transpose()
            } else {
                DVector::zeros(m)
            }
        })
        .collect();
    let null = complete_null_space(&b, rank, null);
    let constraint = &problem.constraint;
    let feasible_tol = T::lit(1e-10) * (T::one() + v0.amax());

    if null.is_empty() {
        if !constraint.contains(v0.as_slice()) {
            let mut proj = v0.clone();
            constraint.project_in_place(proj.as_mut_slice());
            if (&proj - &v0).norm() > feasible_tol {
                return Ok(PhiValue::Infeasible);
            }
            v0 = proj;
        }
        return Ok(PhiValue::Finite {
            value: problem.cost(x, &v0),
            argmin: v0,
            brute_force: None,
        });
    }

    let z = DMatrix::from_columns(&null);
    let to_affine = |v: &DVector<T>| &v0 + &z * (z.transpose() * (v - &v0));
    let value = |v: &DVector<T>| problem.cost(x, v);
    let grad = |v: &DVector<T>| problem.cost_u(x, v);

    if constraint.is_unconstrained() {
        let project = |v: &mut DVector<T>| *v = to_affine(v);
        let (fv, v) = polish(&value, &grad, &project, v0.clone(), true)?;
        return Ok(PhiValue::Finite {
            value: fv,
            argmin: v,
            brute_force: None,
        });
    }

    // Dykstra alternating projections onto the affine set and K
    let project_both = |v: &mut DVector<T>| {
        let mut y = v.clone();
        let mut p = DVector::zeros(m);
        let mut q = DVector::zeros(m);
        for _ in 0..500 {
            let a_pt = to_affine(&(&y + &p));
            p = &y + &p - &a_pt;
            let mut k_pt = &a_pt + &q;
            constraint.project_in_place(k_pt.as_mut_slice());
            q = &a_pt + &q - &k_pt;
            let change = (&k_pt - &y).norm();
            y = k_pt;
            if change <= T::eps() * T::lit(64.0) * (T::one() + y.norm()) {
                break;
            }
        }
        *v = y;
    };
    let mut start = v0.clone();
    project_both(&mut start);
    if (to_affine(&start) - &start).norm() > T::lit(1e-7) * (T::one() + start.norm()) {
        return Ok(PhiValue::Infeasible);
    }
    let (mut fv, mut v) = polish(&value, &grad, &project_both, start, false)?;

    // brute force over the null-space coordinates of the constraint lattice
    let lattice = ControlGrid::for_constraint(constraint, m, resolution, None)?;
    let radius = lattice
        .points
        .iter()
        .map(|p| (p - &v0).norm())
        .fold(T::zero(), |a, b| a.max(b));
    let k = null.len();
    let coords = ControlGrid::uniform_box(&vec![-radius; k], &vec![radius; k], resolution)?;
    let mut brute: Option<(T, DVector<T>)> = None;
    for w in coords.points() {
        let cand = &v0 + &z * w;
        if !constraint.contains(cand.as_slice()) {
            continue;
        }
        let fc = value(&cand);
        if brute.as_ref().map_or(true, |(b, _)| fc < *b) {
            brute = Some((fc, cand));
        }
    }
    if let Some((fb, vb)) = &brute {
        if *fb < fv {
            let (fp, vp) = polish(&value, &grad, &project_both, vb.clone(), false)?;
            if fp < fv {
                fv = fp;
                v = vp;
            }
        }
    }
    Ok(PhiValue::Finite {
        value: fv,
        argmin: v,
        brute_force: brute.map(|(b, _)| b),
    })
}

/// Orthonormal basis of `ker B`, filling in vectors the thin SVD omits.
fn complete_null_space<T: Real>(b: &DMatrix<T>, rank: usize, partial: Vec<DVector<T>>) -> Vec<DVector<T>> {
    let m = b.ncols();
    let want = m - rank;
    let mut basis: Vec<DVector<T>> = Vec::with_capacity(want);
    let row_space: Vec<DVector<T>> = {
        let svd = b.clone().svd(false, true);
        let vt = svd.v_t.unwrap();
        let cut = svd.singular_values.amax() * T::lit(1e-10);
        (0..svd.singular_values.len())
            .filter(|&k| svd.singular_values[k] > cut)
            .map(|k| vt.row(k).transpose())
            .collect()
    };
    let candidates = partial
        .into_iter()
        .chain((0..m).map(|i| DVector::from_fn(m, |j, _| if i == j { T::one() } else { T::zero() })));
    for mut c in candidates {
        for r in row_space.iter().chain(basis.iter()) {
            let d = r.dot(&c);
            c -= r * d;
        }
        let norm = c.norm();
        if norm > T::lit(1e-6) {
            basis.push(c / norm);
            if basis.len() == want {
                break;
            }
        }
    }
    basis
}

/// Backward-induction value function and policy on a state lattice.
#[derive(Clone, Debug)]
pub struct DpValue<T: Real> {
    pub value: GridField<T>,
    pub policy: GridField<T>,
}

impl<T: Real> DpValue<T> {
    pub fn value_at(&self, t: T, x: &[T]) -> T {
        self.value.interpolate(t, x)[0]
    }

    pub fn policy_at(&self, t: T, x: &[T]) -> DVector<T> {
        self.policy.interpolate(t, x)
    }
}

/// `v(T) = g`, `v(t, x) = min_u dt·F(x, u) + v(t + dt, x + dt·f(x, u))` with
/// multilinear clamped interpolation; ties go to the lowest control index.
pub fn dp_solve<T: Real>(
    problem: &ControlProblem<T>,
    state_grid: &Grid<T>,
    controls: &ControlGrid<T>,
    time_grid: &TimeGrid<T>,
) -> Result<DpValue<T>> {
    let n = problem.state_dim;
    let m = problem.control_dim;
    if state_grid.dim() != n || controls.dim() != m {
        return Err(Error::invalid("dp: grid dimensions do not match the problem"));
    }
    if n > 2 {
        return Err(Error::invalid("dp oracle is limited to state dimension <= 2"));
    }
    let mut value = GridField::zeros(state_grid.clone(), time_grid.clone(), 1);
    let mut policy = GridField::zeros(state_grid.clone(), time_grid.clone(), m);
    let last = time_grid.steps();
    for node in 0..state_grid.len() {
        value.slice_mut(last)[node] = problem.g(&state_grid.node_coords(node));
    }
    for k in (0..last).rev() {
        let dt = time_grid.time(k + 1) - time_grid.time(k);
        let next = value.slice(k + 1).to_vec();
        let rows: Vec<(T, usize)> = (0..state_grid.len())
            .into_par_iter()
            .map(|node| {
                let x = state_grid.node_coords(node);
                let mut best = (T::zero(), usize::MAX);
                for (i, u) in controls.points.iter().enumerate() {
                    let succ = &x + problem.f(&x, u) * dt;
                    let v = dt * problem.cost(&x, u) + state_grid.stencil(succ.as_slice()).apply(&next, 1)[0];
                    if best.1 == usize::MAX || v < best.0 {
                        best = (v, i);
                    }
                }
                best
            })
            .collect();
        for (node, (v, i)) in rows.into_iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::BlowUp {
                    stage: "dp",
                    time: time_grid.time(k).as_f64(),
                });
            }
            value.slice_mut(k)[node] = v;
            policy.slice_mut(k)[node * m..(node + 1) * m].copy_from_slice(controls.points[i].as_slice());
        }
    }
    // terminal policy: reuse the last decision for plotting
    let prev = policy.slice(last - 1).to_vec();
    policy.slice_mut(last).copy_from_slice(&prev);
    Ok(DpValue { value, policy })
}

/// Closed-loop controls compared with a reference law along one trajectory.
#[derive(Clone, Debug)]
pub struct ConsistencyReport<T> {
    pub times: Vec<T>,
    pub deviations: Vec<T>,
    pub max_deviation: T,
    pub within_tolerance: bool,
}

/// Integrates the closed loop of `feedback` from `(t, y)` and measures the gap
/// between the recorded controls and `reference(s, x(s))`.
pub fn open_loop_consistency<T: Real>(
    problem: &ControlProblem<T>,
    feedback: &GridField<T>,
    reference: &(dyn Fn(T, &DVector<T>) -> DVector<T> + Sync),
    t: T,
    y: &DVector<T>,
    tol: T,
) -> Result<ConsistencyReport<T>> {
    let traj = integrate_flow(problem, feedback, t, y)?;
    let deviations: Vec<T> = traj
        .times
        .iter()
        .zip(traj.states.iter().zip(&traj.controls))
        .map(|(&s, (x, u))| (u - reference(s, x)).amax())
        .collect();
    let max_deviation = deviations.iter().fold(T::zero(), |a, &b| a.max(b));
    Ok(ConsistencyReport {
        times: traj.times,
        deviations,
        max_deviation,
        within_tolerance: max_deviation <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::{derive_lqr, lqr_gain, solve_riccati};
    use crate::problem::{academic_problem, lqr_to_problem, LqrSpec, ScalarMap};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn control_lattices() {
        let g = ControlGrid::uniform_box(&[-1.0, 0.0], &[1.0, 2.0], 3).unwrap();
        assert_eq!(g.len(), 9);
        assert!(g.points().iter().any(|p| p == &v(&[1.0, 2.0])));
        let ball = ConstraintSet::ball(vec![0.0, 0.0], 1.0).unwrap();
        let b = ControlGrid::for_constraint(&ball, 2, 11, None).unwrap();
        assert!(b.points().iter().all(|p| ball.contains(p.as_slice())));
        assert!(ControlGrid::<f64>::for_constraint(&ConstraintSet::Unconstrained, 1, 5, None).is_err());
    }

    #[test]
    fn academic_phi_value() {
        // f(x) = 1 everywhere: φ(x, 2) = ½·4 − 2·1 = 0
        let p = academic_problem(ScalarMap::constant(1.0), 1.0).unwrap();
        let r = phi_eval(&p, &v(&[0.3]), &v(&[2.0]), 51).unwrap();
        assert!(r.value().abs() < 1e-12);
        for (x, xi) in [(0.5f64, -1.0f64), (-2.0, 0.7)] {
            let p = academic_problem(ScalarMap::sine(1.0, 1.0), 1.0).unwrap();
            let fx = x.sin();
            let r = phi_eval(&p, &v(&[x]), &v(&[xi]), 51).unwrap();
            assert!((r.value() - (0.5 * xi * xi - xi * fx)).abs() < 1e-12);
        }
    }

    fn wide_spec(rng: &mut ChaCha8Rng) -> LqrSpec<f64> {
        let mut m = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let lq = m(2, 2);
        let lr = m(3, 3);
        LqrSpec {
            A: m(2, 2),
            B: m(2, 3) + DMatrix::from_row_slice(2, 3, &[1.5, 0.0, 0.0, 0.0, 1.5, 0.0]),
            Q: &lq * lq.transpose(),
            R: &lr * lr.transpose() * 0.3 + DMatrix::identity(3, 3),
            H: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        }
    }

    #[test]
    fn lqr_phi_matches_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let spec = wide_spec(&mut rng);
            let prob = lqr_to_problem(&spec).unwrap();
            let d = derive_lqr(&spec).unwrap();
            for _ in 0..5 {
                let x = v(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
                let xi = v(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
                let expect = 0.5 * xi.dot(&(&d.C * &xi)) + xi.dot(&(&d.D * &x)) + 0.5 * x.dot(&(&d.E * &x));
                let got = phi_eval(&prob, &x, &xi, 21).unwrap();
                let rel = (got.value() - expect).abs() / expect.abs().max(1e-3);
                assert!(rel <= 1e-8, "rel {rel}");
                if let PhiValue::Finite { argmin, .. } = &got {
                    // φ(x, f(x, u*)) = F(x, u*)
                    assert!((prob.f(&x, argmin) - &xi).amax() <= 1e-9);
                    assert!((prob.cost(&x, argmin) - got.value()).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn unreachable_velocity_is_infinite() {
        let spec: LqrSpec<f64> = LqrSpec {
            A: DMatrix::zeros(2, 2),
            B: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            Q: DMatrix::identity(2, 2),
            R: DMatrix::identity(1, 1),
            H: DMatrix::zeros(2, 2),
        };
        // build the problem by hand: the gramian is singular, so no folding
        let mut prob = crate::problem::velocity_problem(2, 1.0).unwrap();
        let b = spec.B.clone();
        let b2 = spec.B.clone();
        prob.control_dim = 1;
        prob.dynamics = Arc::new(move |_x, u| &b * u);
        prob.dynamics_jac_u = Arc::new(move |_x, _u| b2.clone());
        prob.running_cost = Arc::new(|_x, u| 0.5 * u.norm_squared());
        prob.running_cost_grad_u = Arc::new(|_x, u| u.clone());
        let r = phi_eval(&prob, &v(&[0.0, 0.0]), &v(&[1.0, 1.0]), 11).unwrap();
        assert!(r.is_infeasible());
        assert_eq!(r.value(), f64::INFINITY);
        let ok = phi_eval(&prob, &v(&[0.0, 0.0]), &v(&[1.0, 0.0]), 11).unwrap();
        assert!((ok.value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constrained_phi_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = wide_spec(&mut rng);
        let prob = lqr_to_problem(&spec)
            .unwrap()
            .with_constraint(ConstraintSet::bounds(vec![-1.0; 3], vec![1.0; 3]).unwrap())
            .unwrap();
        let x = v(&[0.2, -0.1]);
        let xi = prob.f(&x, &v(&[0.5, -0.3, 0.1]));
        match phi_eval(&prob, &x, &xi, 101).unwrap() {
            PhiValue::Finite { value, argmin, brute_force } => {
                assert!(prob.constraint.contains(argmin.as_slice()) || (prob.constraint.project(&argmin) - &argmin).amax() < 1e-12);
                let bf = brute_force.unwrap();
                assert!(value <= bf + 1e-12);
                assert!(bf - value <= 1e-2);
            }
            PhiValue::Infeasible => panic!("feasible velocity reported infeasible"),
        }
        // a velocity needing controls far outside K
        let far = prob.f(&x, &v(&[30.0, 30.0, 30.0]));
        assert!(phi_eval(&prob, &x, &far, 11).unwrap().is_infeasible());
    }

    fn quadratic_problem(spec: &LqrSpec<f64>) -> ControlProblem<f64> {
        crate::problem::lqr_problem_explicit_terminal(spec).unwrap()
    }

    #[test]
    fn hamiltonian_unconstrained_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = crate::lqr::tests_support::random_spec(&mut rng);
        let prob = quadratic_problem(&spec);
        let p = v(&[0.4, -1.2]);
        let x = v(&[0.3, 0.1]);
        let (_, u) = hamiltonian_argmin(&prob, &p, &x, 5, CostateSign::Plus).unwrap();
        let expect = -spec.R.clone().cholesky().unwrap().solve(&(spec.B.transpose() * &p));
        assert!((u - &expect).amax() <= 1e-8);
        let (_, u0) = hamiltonian_argmin(&prob, &DVector::zeros(2), &x, 5, CostateSign::Minus).unwrap();
        assert!(u0.amax() <= 1e-10);
    }

    #[test]
    fn hamiltonian_box_minimizer_is_on_boundary_with_kkt() {
        let spec = LqrSpec::scalar(0.0, 1.0, 1.0, 1.0, 0.0);
        let prob = quadratic_problem(&spec)
            .with_constraint(ConstraintSet::bounds(vec![-0.5], vec![0.5]).unwrap())
            .unwrap();
        let p = v(&[2.0]);
        let x = v(&[0.0]);
        let (val, u) = hamiltonian_argmin(&prob, &p, &x, 21, CostateSign::Plus).unwrap();
        assert_eq!(u[0], -0.5);
        // derivative points outward at the lower bound
        let slope = prob.cost_u(&x, &u)[0] + p[0];
        assert!(slope > 0.0);
        for i in 0..=200 {
            let w = v(&[-0.5 + 0.005 * i as f64]);
            assert!(val <= prob.cost(&x, &w) + p.dot(&prob.f(&x, &w)) + 1e-12);
        }
    }

    #[test]
    fn hamiltonian_unbounded_is_detected() {
        let mut prob = crate::problem::velocity_problem(1, 1.0).unwrap();
        prob.running_cost = Arc::new(|_x, u| -u[0] * u[0]);
        prob.running_cost_grad_u = Arc::new(|_x, u| u * -2.0);
        let r = hamiltonian_argmin(&prob, &v(&[0.1]), &v(&[0.0]), 5, CostateSign::Plus);
        assert!(matches!(r, Err(Error::Unbounded)));
    }

    #[test]
    fn dp_trivial_cases() {
        let grid: Grid<f64> = Grid::uniform(1, -1.0, 1.0, 11).unwrap();
        let tg: TimeGrid<f64> = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let controls = ControlGrid::uniform_box(&[-1.0], &[1.0], 5).unwrap();
        let mut prob = crate::problem::velocity_problem(1, 1.0).unwrap();
        let dp = dp_solve(&prob, &grid, &controls, &tg).unwrap();
        assert!(dp.value.values().iter().all(|&x| x == 0.0));
        prob.running_cost = Arc::new(|_x, _u| 1.0);
        let dp = dp_solve(&prob, &grid, &controls, &tg).unwrap();
        for k in 0..=20 {
            let t = tg.time(k);
            for node in 0..grid.len() {
                assert!((dp.value.slice(k)[node] - (1.0 - t)).abs() <= 0.05);
            }
        }
    }

    #[test]
    fn dp_matches_riccati_on_scalar_lqr() {
        let spec = LqrSpec::scalar(0.0, 1.0, 1.0, 1.0, 0.0);
        let prob = lqr_to_problem(&spec).unwrap();
        let grid = Grid::uniform(1, -2.0, 2.0, 81).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let controls = ControlGrid::uniform_box(&[-2.0], &[2.0], 161).unwrap();
        let dp = dp_solve(&prob, &grid, &controls, &tg).unwrap();
        let d = derive_lqr(&spec).unwrap();
        let ric = solve_riccati(&d, 1.0, 100).unwrap();
        for y in [-1.0, -0.5, 0.5, 1.0] {
            let exact = 0.5 * 1f64.tanh() * y * y;
            let got = dp.value_at(0.0, &[y]);
            assert!((got - exact).abs() <= 0.05 * exact, "v({y}) = {got}, exact {exact}");
            let gain = lqr_gain(&spec, &d, &ric, 0.0).unwrap()[(0, 0)];
            let pol = dp.policy_at(0.0, &[y])[0] / y;
            assert!((pol - gain).abs() <= 0.1 * gain.abs(), "gain {pol} vs {gain}");
        }
    }

    #[test]
    fn dp_value_decreases_with_richer_controls() {
        let prob = academic_problem(ScalarMap::linear(-1.0, 0.0), 1.0).unwrap();
        let grid = Grid::uniform(1, -1.0, 1.0, 21).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let coarse = dp_solve(&prob, &grid, &ControlGrid::uniform_box(&[-1.0], &[1.0], 5).unwrap(), &tg).unwrap();
        let fine = dp_solve(&prob, &grid, &ControlGrid::uniform_box(&[-1.0], &[1.0], 9).unwrap(), &tg).unwrap();
        for (c, f) in coarse.value.values().iter().zip(fine.value.values()) {
            assert!(f <= c);
        }
        assert!(coarse.policy.values().iter().all(|u| (-1.0..=1.0).contains(u)));
    }

    #[test]
    fn consistency_of_linear_feedback() {
        let spec = LqrSpec::scalar(0.0, 1.0, 1.0, 1.0, 0.0);
        let prob = lqr_to_problem(&spec).unwrap();
        let d = derive_lqr(&spec).unwrap();
        let ric = solve_riccati(&d, 1.0, 200).unwrap();
        let grid = Grid::uniform(1, -2.0, 2.0, 41).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let field = crate::lqr::lqr_feedback_field(&spec, &ric, &grid, &tg).unwrap();
        let gain = |t: f64, x: &DVector<f64>| lqr_gain(&spec, &d, &ric, t).unwrap() * x;
        let r = open_loop_consistency(&prob, &field, &gain, 0.0, &v(&[0.8]), 1e-6).unwrap();
        assert!(r.within_tolerance, "deviation {}", r.max_deviation);
        let perturbed = GridField::from_fn(grid, tg, 1, |t, x| gain(t, x) * 1.1);
        let worse = open_loop_consistency(&prob, &perturbed, &gain, 0.0, &v(&[0.8]), 1e-6).unwrap();
        assert!(worse.max_deviation > r.max_deviation);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn hamiltonian_value_is_a_lower_bound(p0 in -3.0f64..3.0, x0 in -1.0f64..1.0, lo in -1.0f64..0.0, w in 0.1f64..2.0) {
            let spec = LqrSpec::scalar(0.3, 1.0, 1.0, 1.0, 0.0);
            let prob = quadratic_problem(&spec)
                .with_constraint(ConstraintSet::bounds(vec![lo], vec![lo + w]).unwrap())
                .unwrap();
            let (val, u) = hamiltonian_argmin(&prob, &v(&[p0]), &v(&[x0]), 11, CostateSign::Minus).unwrap();
            prop_assert!(prob.constraint.contains(u.as_slice()));
            for i in 0..=50 {
                let c = v(&[lo + w * i as f64 / 50.0]);
                prop_assert!(val <= prob.cost(&v(&[x0]), &c) - p0 * prob.f(&v(&[x0]), &c)[0] + 1e-12);
            }
        }
    }
}
