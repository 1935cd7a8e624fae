//! Per-slice descent directions.
//!
//! Both solvers minimize the discrete functional
//!
//! ```text
//! J(W) = ½ Σ_edges c_e |W_j − W_i|² + Σ_i V_i g_i·W_i,   W = U − u
//! ```
//!
//! where `V` are the trapezoidal node weights and `c_e` the matching edge
//! conductances (halved on faces). The stencil is the `2·dim + 1` Laplacian
//! with homogeneous Neumann conditions on the box.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::problem::ConstraintSet;
use crate::scalar::Real;

/// Stopping rule shared by the iterative slice solvers.
#[derive(Clone, Debug)]
pub struct SolverSettings<T> {
    /// Bound on the largest nodal update (obstacle) or scaled residual (CG).
    pub tol: T,
    pub max_iter: usize,
    /// Over-relaxation factor for the projected sweeps; `None` picks one
    /// from the grid size.
    pub omega: Option<T>,
}

impl<T: Real> SolverSettings<T> {
    pub fn new(tol: T, max_iter: usize) -> Self {
        SolverSettings {
            tol,
            max_iter,
            omega: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > T::zero()) || self.max_iter == 0 {
            return Err(Error::invalid("solver settings need tol > 0 and max_iter > 0"));
        }
        if let Some(w) = self.omega {
            if !(w > T::zero() && w < T::lit(2.0)) {
                return Err(Error::invalid("relaxation factor must lie in (0, 2)"));
            }
        }
        Ok(())
    }
}

/// Neumann Laplacian of a grid in compressed-row form, plus an optional mass
/// term `α V` that makes the energy a full `H¹` norm.
#[derive(Clone, Debug)]
pub struct SliceOperator<T> {
    grid: Grid<T>,
    weights: Vec<T>,
    mass: T,
    diag: Vec<T>,
    offsets: Vec<usize>,
    neighbors: Vec<(usize, T)>,
}

impl<T: Real> SliceOperator<T> {
    pub fn new(grid: &Grid<T>) -> Self {
        let dim = grid.dim();
        let n = grid.len();
        let half = T::lit(0.5);
        let face_weight = |axis: usize, i: usize| {
            let h = grid.spacing()[axis];
            if i == 0 || i + 1 == grid.nodes_per_axis()[axis] {
                h * half
            } else {
                h
            }
        };
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::with_capacity(n * 2 * dim);
        let mut diag = vec![T::zero(); n];
        let mut idx = vec![0; dim];
        offsets.push(0);
        for node in 0..n {
            grid.multi_index_into(node, &mut idx);
            for axis in 0..dim {
                let cross = (0..dim)
                    .filter(|&a| a != axis)
                    .fold(T::one(), |w, a| w * face_weight(a, idx[a]));
                let c = cross / grid.spacing()[axis];
                let stride = grid.strides()[axis];
                if idx[axis] > 0 {
                    neighbors.push((node - stride, c));
                    diag[node] += c;
                }
                if idx[axis] + 1 < grid.nodes_per_axis()[axis] {
                    neighbors.push((node + stride, c));
                    diag[node] += c;
                }
            }
            offsets.push(neighbors.len());
        }
        SliceOperator {
            grid: grid.clone(),
            weights: grid.node_weights(),
            mass: T::zero(),
            diag,
            offsets,
            neighbors,
        }
    }

    /// Adds `α V` to the operator. On a truncated box the pure Neumann energy
    /// does not see constants, so a bounded control set alone limits the
    /// constant part of an obstacle direction; `α > 0` restores coercivity.
    pub fn with_mass(mut self, alpha: T) -> Result<Self> {
        if !(alpha >= T::zero() && alpha.is_finite()) {
            return Err(Error::invalid("mass coefficient must be finite and non-negative"));
        }
        for (d, &w) in self.diag.iter_mut().zip(&self.weights) {
            *d += (alpha - self.mass) * w;
        }
        self.mass = alpha;
        Ok(self)
    }

    pub fn mass(&self) -> T {
        self.mass
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    fn row(&self, node: usize) -> &[(usize, T)] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    /// `(L w)` for a slice with `c` interleaved components.
    pub fn apply(&self, w: &[T], c: usize) -> Vec<T> {
        let mut out = vec![T::zero(); w.len()];
        for node in 0..self.grid.len() {
            for k in 0..c {
                let mut acc = self.diag[node] * w[node * c + k];
                for &(j, cij) in self.row(node) {
                    acc -= cij * w[j * c + k];
                }
                out[node * c + k] = acc;
            }
        }
        out
    }

    /// `Σ c_e |w_j − w_i|² + α Σ V w²`, the discrete `∫|∇w|² + α∫w²`.
    pub fn dirichlet_energy(&self, w: &[T], c: usize) -> T {
        let lw = self.apply(w, c);
        lw.iter().zip(w).fold(T::zero(), |s, (&a, &b)| s + a * b)
    }

    /// Per-component weighted means.
    pub fn weighted_mean(&self, v: &[T], c: usize) -> Vec<T> {
        let total = self.weights.iter().fold(T::zero(), |s, &w| s + w);
        let mut mean = vec![T::zero(); c];
        for (node, &w) in self.weights.iter().enumerate() {
            for k in 0..c {
                mean[k] += w * v[node * c + k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= total);
        mean
    }

    fn subtract_mean(&self, v: &mut [T], c: usize) -> Vec<T> {
        let mean = self.weighted_mean(v, c);
        for (i, x) in v.iter_mut().enumerate() {
            *x -= mean[i % c];
        }
        mean
    }

    /// Default over-relaxation for projected sweeps.
    fn default_omega(&self) -> T {
        let n = self.grid.nodes_per_axis().iter().copied().max().unwrap_or(3);
        let s = (T::pi() / T::from_count(n - 1)).sin();
        T::lit(2.0) / (T::one() + s)
    }
}

/// Result of one constrained slice solve.
#[derive(Clone, Debug)]
pub struct ObstacleSolution<T> {
    /// Direction field `U` at the slice, node-major with `m` components.
    pub u_slice: Vec<T>,
    pub iterations: usize,
    /// Largest nodal update of the final sweep.
    pub residual: T,
    /// `Σ V ∇I·(U − u)`.
    pub descent_inner: T,
    /// Weighted mean of `∇I` removed before solving (unconstrained case only).
    pub discarded_mean: Vec<T>,
}

/// Result of the Neumann–Poisson direction.
#[derive(Clone, Debug)]
pub struct PoissonSolution<T> {
    /// Mean-zero solution of `−ΔU + ∇I = 0`.
    pub u_slice: Vec<T>,
    pub iterations: usize,
    pub residual: T,
    pub discarded_mean: Vec<T>,
}

fn check_slices<T: Real>(grid: &Grid<T>, grad: &[T], u: &[T]) -> Result<usize> {
    let n = grid.len();
    if grad.len() != u.len() || grad.is_empty() || grad.len() % n != 0 {
        return Err(Error::invalid("slice lengths do not match the grid"));
    }
    if !crate::scalar::all_finite(grad) || !crate::scalar::all_finite(u) {
        return Err(Error::invalid("non-finite slice data"));
    }
    Ok(grad.len() / n)
}

/// Projected Gauss–Seidel (with over-relaxation) for the obstacle problem
/// `min_{U ∈ K} ∫ ½|∇U − ∇u|² + ∇I·(U − u)` on one slice.
pub fn solve_obstacle_slice<T: Real>(
    op: &SliceOperator<T>,
    grad: &[T],
    u: &[T],
    constraint: &ConstraintSet<T>,
    settings: &SolverSettings<T>,
) -> Result<ObstacleSolution<T>> {
    solve_obstacle_slice_from(op, grad, u, constraint, settings, None)
}

/// As [`solve_obstacle_slice`], starting the sweeps from `initial` instead of `u`.
pub fn solve_obstacle_slice_from<T: Real>(
    op: &SliceOperator<T>,
    grad: &[T],
    u: &[T],
    constraint: &ConstraintSet<T>,
    settings: &SolverSettings<T>,
    initial: Option<&[T]>,
) -> Result<ObstacleSolution<T>> {
    settings.validate()?;
    let m = check_slices(&op.grid, grad, u)?;
    constraint.validate(Some(m))?;
    let n = op.grid.len();

    let mut g = grad.to_vec();
    let singular = constraint.is_unconstrained() && op.mass == T::zero();
    let discarded_mean = if singular {
        op.subtract_mean(&mut g, m)
    } else {
        vec![T::zero(); m]
    };
    let mut big_u = match initial {
        Some(v) if v.len() == u.len() => v.to_vec(),
        Some(_) => return Err(Error::invalid("initial guess has wrong length")),
        None => u.to_vec(),
    };
    for node in 0..n {
        constraint.project_in_place(&mut big_u[node * m..(node + 1) * m]);
    }
    let omega = settings.omega.unwrap_or_else(|| op.default_omega());
    let mut candidate = vec![T::zero(); m];
    let mut iterations = 0;
    let mut last_update = T::zero();
    loop {
        if iterations >= settings.max_iter {
            return Err(Error::NotConverged {
                solver: "projected Gauss-Seidel",
                iterations,
                residual: last_update.as_f64(),
            });
        }
        iterations += 1;
        let mut max_update = T::zero();
        for node in 0..n {
            let base = node * m;
            let d = op.diag[node];
            for k in 0..m {
                let mut acc = -op.weights[node] * g[base + k];
                for &(j, cij) in op.row(node) {
                    acc += cij * (big_u[j * m + k] - u[j * m + k]);
                }
                let gs = u[base + k] + acc / d;
                candidate[k] = big_u[base + k] + omega * (gs - big_u[base + k]);
            }
            constraint.project_in_place(&mut candidate);
            for k in 0..m {
                max_update = max_update.max((candidate[k] - big_u[base + k]).abs());
                big_u[base + k] = candidate[k];
            }
        }
        last_update = max_update;
        if !max_update.is_finite() {
            return Err(Error::BlowUp {
                stage: "obstacle",
                time: f64::NAN,
            });
        }
        if max_update < settings.tol {
            break;
        }
    }
    if singular {
        // fix the additive constant: U − u has weighted mean zero
        let mut w: Vec<T> = big_u.iter().zip(u).map(|(&a, &b)| a - b).collect();
        op.subtract_mean(&mut w, m);
        big_u = w.iter().zip(u).map(|(&a, &b)| a + b).collect();
    }
    let descent_inner = descent_inner_product(op, grad, &big_u, u)?;
    Ok(ObstacleSolution {
        u_slice: big_u,
        iterations,
        residual: last_update,
        descent_inner,
        discarded_mean,
    })
}

/// Jacobi-preconditioned conjugate gradients for `−ΔU + ∇I = 0` with
/// homogeneous Neumann data; the returned field has weighted mean zero.
pub fn poisson_direction<T: Real>(
    op: &SliceOperator<T>,
    grad: &[T],
    settings: &SolverSettings<T>,
) -> Result<PoissonSolution<T>> {
    settings.validate()?;
    if op.mass != T::zero() {
        return Err(Error::invalid("the Poisson direction uses the pure Neumann operator"));
    }
    let m = check_slices(&op.grid, grad, grad)?;
    let n = op.grid.len();
    let mut g = grad.to_vec();
    let discarded_mean = op.subtract_mean(&mut g, m);
    // L W = −V g̃
    let b: Vec<T> = (0..n * m).map(|i| -op.weights[i / m] * g[i]).collect();
    let scaled = |r: &[T]| {
        r.iter()
            .enumerate()
            .fold(T::zero(), |s, (i, &v)| s.max((v / op.diag[i / m]).abs()))
    };
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y);

    let mut x = vec![T::zero(); n * m];
    let mut r = b;
    let mut residual = scaled(&r);
    let mut iterations = 0;
    if residual > settings.tol {
        let mut z: Vec<T> = r.iter().enumerate().map(|(i, &v)| v / op.diag[i / m]).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        loop {
            if iterations >= settings.max_iter {
                return Err(Error::NotConverged {
                    solver: "conjugate gradient",
                    iterations,
                    residual: residual.as_f64(),
                });
            }
            iterations += 1;
            let lp = op.apply(&p, m);
            let curvature = dot(&p, &lp);
            if !(curvature > T::zero()) {
                break;
            }
            let alpha = rz / curvature;
            for i in 0..x.len() {
                x[i] += alpha * p[i];
                r[i] -= alpha * lp[i];
            }
            residual = scaled(&r);
            if !residual.is_finite() {
                return Err(Error::BlowUp {
                    stage: "poisson",
                    time: f64::NAN,
                });
            }
            if residual <= settings.tol {
                break;
            }
            for i in 0..z.len() {
                z[i] = r[i] / op.diag[i / m];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..p.len() {
                p[i] = z[i] + beta * p[i];
            }
        }
    }
    op.subtract_mean(&mut x, m);
    Ok(PoissonSolution {
        u_slice: x,
        iterations,
        residual,
        discarded_mean,
    })
}

/// Trapezoidal quadrature of `∇I·(U − u)` over the slice.
pub fn descent_inner_product<T: Real>(op: &SliceOperator<T>, grad: &[T], big_u: &[T], u: &[T]) -> Result<T> {
    let m = check_slices(&op.grid, grad, u)?;
    if big_u.len() != u.len() {
        return Err(Error::invalid("direction slice has wrong length"));
    }
    let mut acc = T::zero();
    for i in 0..grad.len() {
        acc += op.weights[i / m] * grad[i] * (big_u[i] - u[i]);
    }
    Ok(acc)
}

/// Largest violation of the discrete variational inequality at `U`.
///
/// With `r = U* − U` the Gauss–Seidel correction at a node, a free node needs
/// `r = 0` and a node on `∂K` needs `r` in the outward normal cone.
pub fn complementarity_residual<T: Real>(
    op: &SliceOperator<T>,
    grad: &[T],
    u: &[T],
    big_u: &[T],
    constraint: &ConstraintSet<T>,
) -> Result<T> {
    let m = check_slices(&op.grid, grad, u)?;
    let mut g = grad.to_vec();
    if constraint.is_unconstrained() && op.mass == T::zero() {
        op.subtract_mean(&mut g, m);
    }
    let w: Vec<T> = big_u.iter().zip(u).map(|(&a, &b)| a - b).collect();
    let lw = op.apply(&w, m);
    let mut worst = T::zero();
    let mut r = vec![T::zero(); m];
    for node in 0..op.grid.len() {
        let base = node * m;
        for k in 0..m {
            r[k] = -(lw[base + k] + op.weights[node] * g[base + k]) / op.diag[node];
        }
        let at = &big_u[base..base + m];
        let violation = match constraint {
            ConstraintSet::Unconstrained => r.iter().fold(T::zero(), |s, v| s.max(v.abs())),
            ConstraintSet::Box { lo, hi } => (0..m).fold(T::zero(), |s, k| {
                let v = if at[k] <= lo[k] && at[k] >= hi[k] {
                    T::zero()
                } else if at[k] <= lo[k] {
                    r[k].max(T::zero())
                } else if at[k] >= hi[k] {
                    (-r[k]).max(T::zero())
                } else {
                    r[k].abs()
                };
                s.max(v)
            }),
            ConstraintSet::Ball { center, radius } => {
                let mut dist2 = T::zero();
                for k in 0..m {
                    dist2 += (at[k] - center[k]) * (at[k] - center[k]);
                }
                let dist = dist2.sqrt();
                if dist < *radius * (T::one() - T::lit(1e3) * T::eps()) {
                    r.iter().fold(T::zero(), |s, v| s.max(v.abs()))
                } else {
                    // split r into normal and tangential parts
                    let mut rn = T::zero();
                    for k in 0..m {
                        rn += r[k] * (at[k] - center[k]) / dist;
                    }
                    let mut tangential = T::zero();
                    for k in 0..m {
                        let t = r[k] - rn * (at[k] - center[k]) / dist;
                        tangential += t * t;
                    }
                    tangential.sqrt().max((-rn).max(T::zero()))
                }
            }
        };
        worst = worst.max(violation);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn settings(tol: f64) -> SolverSettings<f64> {
        SolverSettings::new(tol, 200_000)
    }

    fn grid1(n: usize) -> Grid<f64> {
        Grid::uniform(1, 0.0, 1.0, n).unwrap()
    }

    #[test]
    fn operator_annihilates_constants_and_is_symmetric() {
        let g: Grid<f64> = Grid::new(vec![0.0, -1.0], vec![2.0, 1.0], vec![5, 7]).unwrap();
        let op = SliceOperator::new(&g);
        let ones = vec![1.0; g.len()];
        assert!(op.apply(&ones, 1).iter().all(|v| v.abs() < 1e-12));
        let a: Vec<f64> = (0..g.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..g.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let la = op.apply(&a, 1);
        let lb = op.apply(&b, 1);
        let ab: f64 = la.iter().zip(&b).map(|(x, y)| x * y).sum();
        let ba: f64 = lb.iter().zip(&a).map(|(x, y)| x * y).sum();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_energy_of_linear_field() {
        // ∫|∇(2x + 3y)|² over [0,2]×[−1,1] = 13·4
        let g: Grid<f64> = Grid::new(vec![0.0, -1.0], vec![2.0, 1.0], vec![5, 7]).unwrap();
        let op = SliceOperator::new(&g);
        let w: Vec<f64> = (0..g.len())
            .map(|n| {
                let x = g.node_coords(n);
                2.0 * x[0] + 3.0 * x[1]
            })
            .collect();
        assert!((op.dirichlet_energy(&w, 1) - 52.0).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_gives_zero_direction() {
        let g = grid1(21);
        let op = SliceOperator::new(&g);
        let zero = vec![0.0; 21];
        let u: Vec<f64> = (0..21).map(|i| 0.01 * i as f64).collect();
        let p = poisson_direction(&op, &zero, &settings(1e-12)).unwrap();
        assert!(p.u_slice.iter().all(|&v| v == 0.0));
        let s = solve_obstacle_slice(&op, &zero, &u, &ConstraintSet::bounds(vec![-1.0], vec![1.0]).unwrap(), &settings(1e-12))
            .unwrap();
        assert_eq!(s.u_slice, u);
        assert_eq!(s.iterations, 1);
        assert_eq!(s.descent_inner, 0.0);
    }

    #[test]
    fn constant_gradient_is_annihilated_by_poisson() {
        let op = SliceOperator::new(&grid1(31));
        let p = poisson_direction(&op, &vec![0.7; 31], &settings(1e-12)).unwrap();
        assert!(p.u_slice.iter().all(|v| v.abs() < 1e-14));
        assert!((p.discarded_mean[0] - 0.7).abs() < 1e-14);
    }

    #[test]
    fn constant_gradient_drives_box_to_lower_bound() {
        let g = Grid::uniform(1, -2.0, 2.0, 41).unwrap();
        let op = SliceOperator::new(&g);
        let k = ConstraintSet::bounds(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let grad = vec![0.4; 82];
        let u = vec![0.0; 82];
        let s = solve_obstacle_slice(&op, &grad, &u, &k, &settings(1e-12)).unwrap();
        assert!(s.u_slice.iter().all(|&v| v == -1.0));
        // KKT: every node at the lower bound with outward correction
        assert_eq!(complementarity_residual(&op, &grad, &u, &s.u_slice, &k).unwrap(), 0.0);
        // brute force over constant fields c ∈ [−1, 1]: J(c) = Σ V·0.4·c·2 is minimal at −1
        let best = (0..=200)
            .map(|i| -1.0 + 0.01 * i as f64)
            .min_by(|a, b| (0.4 * a).partial_cmp(&(0.4 * b)).unwrap())
            .unwrap();
        assert_eq!(best, -1.0);
    }

    #[test]
    fn mass_term_scales_constants_by_weight() {
        let g = grid1(11);
        let op = SliceOperator::new(&g).with_mass(2.5).unwrap();
        let out = op.apply(&vec![1.0; 11], 1);
        for (v, w) in out.iter().zip(op.weights()) {
            assert!((v - 2.5 * w).abs() < 1e-14);
        }
        // replacing the mass is not cumulative
        let again = op.with_mass(1.0).unwrap();
        assert_eq!(again.mass(), 1.0);
        let out = again.apply(&vec![1.0; 11], 1);
        assert!(out.iter().zip(again.weights()).all(|(v, w)| (v - w).abs() < 1e-14));
    }

    #[test]
    fn mass_rejects_bad_coefficients_and_poisson() {
        let g = grid1(11);
        assert!(SliceOperator::new(&g).with_mass(-1.0).is_err());
        assert!(SliceOperator::new(&g).with_mass(f64::NAN).is_err());
        let op = SliceOperator::new(&g).with_mass(1.0).unwrap();
        assert!(poisson_direction(&op, &vec![0.1; 11], &settings(1e-12)).is_err());
    }

    #[test]
    fn mass_keeps_constant_mode_proportional() {
        // without mass a tiny constant gradient saturates the box; with α the
        // direction is −g/α, far inside it
        let g = Grid::uniform(1, -2.0, 2.0, 41).unwrap();
        let k = ConstraintSet::bounds(vec![-1.0], vec![1.0]).unwrap();
        let grad = vec![1e-3; 41];
        let zero = vec![0.0; 41];
        let bare = solve_obstacle_slice(&SliceOperator::new(&g), &grad, &zero, &k, &settings(1e-13)).unwrap();
        assert!(bare.u_slice.iter().all(|&v| v == -1.0));
        let op = SliceOperator::new(&g).with_mass(4.0).unwrap();
        let s = solve_obstacle_slice(&op, &grad, &zero, &k, &settings(1e-13)).unwrap();
        assert!(s.u_slice.iter().all(|&v| (v + 2.5e-4).abs() < 1e-10), "{:?}", &s.u_slice[..3]);
    }

    #[test]
    fn mass_preserves_descent_inequality() {
        let g: Grid<f64> = Grid::uniform(2, -1.0, 1.0, 13).unwrap();
        let k = ConstraintSet::bounds(vec![-0.4], vec![0.3]).unwrap();
        let grad: Vec<f64> = (0..g.len()).map(|i| 3.0 * (i as f64 * 0.7).sin() + 0.2).collect();
        let u: Vec<f64> = (0..g.len()).map(|i| 0.3 * (i as f64 * 0.3).cos() - 0.05).collect();
        for alpha in [0.5, 10.0, 100.0] {
            let op = SliceOperator::new(&g).with_mass(alpha).unwrap();
            let s = solve_obstacle_slice(&op, &grad, &u, &k, &settings(1e-12)).unwrap();
            assert!(s.u_slice.iter().all(|v| (-0.4..=0.3).contains(v)));
            let w: Vec<f64> = s.u_slice.iter().zip(&u).map(|(a, b)| a - b).collect();
            // g·W ≤ −a(W, W) from the variational inequality tested at W = 0
            let gw: f64 = grad.iter().zip(&w).zip(op.weights()).map(|((g, w), m)| g * w * m).sum::<f64>();
            let energy: f64 = op.apply(&w, 1).iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!(gw <= -energy + 1e-9, "α {alpha}: g·W {gw} vs −a(W,W) {}", -energy);
            assert!(complementarity_residual(&op, &grad, &u, &s.u_slice, &k).unwrap() <= 1e-8);
        }
    }

    /// Mean-zero Neumann solution of `U'' = sin 2πx` on [0,1].
    fn neumann_sine(x: f64) -> f64 {
        -(2.0 * PI * x).sin() / (4.0 * PI * PI) + (x - 0.5) / (2.0 * PI)
    }

    #[test]
    fn poisson_sine_matches_neumann_closed_form() {
        let g = grid1(201);
        let op = SliceOperator::new(&g);
        let grad: Vec<f64> = (0..201).map(|i| (2.0 * PI * g.coord(0, i)).sin()).collect();
        let p = poisson_direction(&op, &grad, &settings(1e-13)).unwrap();
        let err = (0..201)
            .map(|i| (p.u_slice[i] - neumann_sine(g.coord(0, i))).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-3, "nodal error {err}");
        // second order: halving h quarters the error
        let g2 = grid1(101);
        let op2 = SliceOperator::new(&g2);
        let grad2: Vec<f64> = (0..101).map(|i| (2.0 * PI * g2.coord(0, i)).sin()).collect();
        let p2 = poisson_direction(&op2, &grad2, &settings(1e-13)).unwrap();
        let err2 = (0..101)
            .map(|i| (p2.u_slice[i] - neumann_sine(g2.coord(0, i))).abs())
            .fold(0.0, f64::max);
        assert!(err2 / err > 3.5 && err2 / err < 4.5, "ratio {}", err2 / err);
    }

    #[test]
    fn unconstrained_obstacle_agrees_with_poisson() {
        let g: Grid<f64> = Grid::uniform(2, -1.0, 1.0, 17).unwrap();
        let op = SliceOperator::new(&g);
        let grad: Vec<f64> = (0..g.len())
            .flat_map(|n| {
                let x = g.node_coords(n);
                [x[0] * x[1] + 0.3, (2.0 * x[0]).sin() - x[1]]
            })
            .collect();
        let u: Vec<f64> = (0..g.len())
            .flat_map(|n| {
                let x = g.node_coords(n);
                [x[0], x[1] * x[1]]
            })
            .collect();
        let s = solve_obstacle_slice(&op, &grad, &u, &ConstraintSet::Unconstrained, &settings(1e-13)).unwrap();
        let p = poisson_direction(&op, &grad, &settings(1e-13)).unwrap();
        for i in 0..u.len() {
            assert!((s.u_slice[i] - u[i] - p.u_slice[i]).abs() <= 1e-8);
        }
    }

    #[test]
    fn ball_constraint_is_feasible_and_complementary() {
        let g: Grid<f64> = Grid::uniform(2, -1.0, 1.0, 13).unwrap();
        let op = SliceOperator::new(&g);
        let k = ConstraintSet::ball(vec![0.0, 0.0], 0.5).unwrap();
        let grad: Vec<f64> = (0..g.len())
            .flat_map(|n| {
                let x = g.node_coords(n);
                [4.0 * x[0], -3.0 * x[1] + 1.0]
            })
            .collect();
        let u = vec![0.0; grad.len()];
        let s = solve_obstacle_slice(&op, &grad, &u, &k, &settings(1e-12)).unwrap();
        assert!(s.u_slice.chunks(2).all(|v| k.contains(v)));
        assert!(complementarity_residual(&op, &grad, &u, &s.u_slice, &k).unwrap() <= 1e-9);
        let w: Vec<f64> = s.u_slice.iter().zip(&u).map(|(a, b)| a - b).collect();
        assert!(s.descent_inner <= -op.dirichlet_energy(&w, 2) + 1e-10);
    }

    #[test]
    fn negating_gradient_negates_inner_product() {
        let g = grid1(11);
        let op = SliceOperator::new(&g);
        let grad: Vec<f64> = (0..11).map(|i| i as f64 - 3.0).collect();
        let neg: Vec<f64> = grad.iter().map(|v| -v).collect();
        let u = vec![0.5; 11];
        let big: Vec<f64> = (0..11).map(|i| (i as f64).cos()).collect();
        let a = descent_inner_product(&op, &grad, &big, &u).unwrap();
        let b = descent_inner_product(&op, &neg, &big, &u).unwrap();
        assert_eq!(a, -b);
        assert_eq!(descent_inner_product(&op, &grad, &u, &u).unwrap(), 0.0);
    }

    #[test]
    fn max_iter_exhaustion_reports_residual() {
        let g = grid1(51);
        let op = SliceOperator::new(&g);
        let grad: Vec<f64> = (0..51).map(|i| (i as f64 * 0.2).sin()).collect();
        let err = solve_obstacle_slice(&op, &grad, &vec![0.0; 51], &ConstraintSet::Unconstrained, &SolverSettings::new(1e-14, 3))
            .unwrap_err();
        assert!(matches!(err, Error::NotConverged { iterations: 3, .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn box_solution_is_feasible_descent_and_complementary(
            seed in proptest::collection::vec(-2.0f64..2.0, 4),
            lo in -1.0f64..-0.1,
            width in 0.2f64..1.5,
        ) {
            let g = Grid::uniform(1, -1.0, 1.0, 25).unwrap();
            let op = SliceOperator::new(&g);
            let k = ConstraintSet::bounds(vec![lo], vec![lo + width]).unwrap();
            let grad: Vec<f64> = (0..25).map(|i| {
                let x = g.coord(0, i);
                seed[0] + seed[1] * x + seed[2] * (3.0 * x).sin()
            }).collect();
            let u: Vec<f64> = (0..25).map(|i| {
                let x = g.coord(0, i);
                (lo + 0.5 * width + seed[3] * 0.25 * width * x).max(lo).min(lo + width)
            }).collect();
            let s = solve_obstacle_slice(&op, &grad, &u, &k, &settings(1e-13)).unwrap();
            prop_assert!(s.u_slice.iter().all(|&v| k.contains(&[v])));
            let w: Vec<f64> = s.u_slice.iter().zip(&u).map(|(a, b)| a - b).collect();
            prop_assert!(s.descent_inner <= 1e-10);
            prop_assert!(s.descent_inner <= -op.dirichlet_energy(&w, 1) + 1e-9);
            prop_assert!(complementarity_residual(&op, &grad, &u, &s.u_slice, &k).unwrap() <= 1e-9);
        }
    }
}
