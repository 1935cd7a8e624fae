//! Backward semi-Lagrangian solver for the linear costate transport system
//!
//! ```text
//! p_t + ∇p·f(x, u) + p·∇[f(x, u(t, x))] = ∇[F(x, u(t, x))]
//! ```
//!
//! Along a closed-loop characteristic this is the linear ODE
//! `p' = ∇[F] − ∇[f]ᵀ p`, integrated here with the trapezoidal rule.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{spatial_gradient, GradientSlice, Grid, GridField};
use crate::problem::ControlProblem;
use crate::scalar::Real;

/// Costate field `p(t, x)` with `N` components.
#[derive(Clone, Debug)]
pub struct CostateField<T> {
    field: GridField<T>,
    max_courant: T,
}

impl<T: Real> CostateField<T> {
    pub fn field(&self) -> &GridField<T> {
        &self.field
    }

    pub fn into_field(self) -> GridField<T> {
        self.field
    }

    /// Largest `|f|·dt / h` seen while tracing characteristics.
    pub fn max_courant(&self) -> T {
        self.max_courant
    }
}

impl<T> Deref for CostateField<T> {
    type Target = GridField<T>;
    fn deref(&self) -> &GridField<T> {
        &self.field
    }
}

/// Total spatial derivatives of `x ↦ f(x, u(x))` and `x ↦ F(x, u(x))`.
#[allow(non_snake_case)]
pub(crate) struct TotalDerivatives<T: Real> {
    /// `f_x + f_u ∇u`
    pub jac: DMatrix<T>,
    /// `F_x + ∇uᵀ F_u`
    pub grad: DVector<T>,
}

pub(crate) fn total_derivatives<T: Real>(
    problem: &ControlProblem<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    du: &DMatrix<T>,
) -> TotalDerivatives<T> {
    let jac = problem.f_x(x, u) + problem.f_u(x, u) * du;
    let grad = problem.cost_x(x, u) + du.transpose() * problem.cost_u(x, u);
    TotalDerivatives { jac, grad }
}

/// Terminal data `p(T, x) = −∇g(x)`.
///
/// The minus sign pairs with `∇I = F_u − p·f_u`; with `g` folded into the
/// running cost the terminal slice is zero.
pub fn terminal_costate<T: Real>(problem: &ControlProblem<T>, grid: &Grid<T>) -> Vec<T> {
    let n = problem.state_dim;
    let mut out = vec![T::zero(); grid.len() * n];
    for node in 0..grid.len() {
        let x = grid.node_coords(node);
        let g = problem.g_grad(&x);
        for i in 0..n {
            out[node * n + i] = -g[i];
        }
    }
    out
}

/// Backward march from `T` to `t0` on the grids of `u`.
pub fn solve_costate<T: Real>(problem: &ControlProblem<T>, u: &GridField<T>) -> Result<CostateField<T>> {
    let grid = u.grid();
    let tg = u.time_grid();
    let n = problem.state_dim;
    if grid.dim() != n {
        return Err(Error::invalid("control field grid dimension differs from state dimension"));
    }
    if u.components() != problem.control_dim {
        return Err(Error::invalid("control field has wrong component count"));
    }
    let mut p = u.zeros_like(n);
    let last = tg.steps();
    p.slice_mut(last).copy_from_slice(&terminal_costate(problem, grid));

    let half = T::lit(0.5);
    let h_min = grid
        .spacing()
        .iter()
        .fold(T::max_value().unwrap_or_else(T::one), |m, &h| m.min(h));
    let mut max_courant = T::zero();
    let mut grad_next: GradientSlice<T> = spatial_gradient(u, last);

    for k in (0..last).rev() {
        let grad_here = spatial_gradient(u, k);
        let (t_a, t_b) = (tg.time(k), tg.time(k + 1));
        let dt = t_b - t_a;
        let p_next = p.slice(k + 1).to_vec();
        let u_here = u.slice(k);
        let u_next = u.slice(k + 1);

        let updates: Vec<Result<(Vec<T>, T)>> = (0..grid.len())
            .into_par_iter()
            .map(|node| {
                let x = grid.node_coords(node);
                let ua = DVector::from_column_slice(&u_here[node * u.components()..(node + 1) * u.components()]);
                // characteristic traced forward over one step (RK2 midpoint)
                let v1 = problem.f(&x, &ua);
                let speed = v1.amax();
                let xm = grid.clamp((&x + &v1 * (dt * half)).as_slice());
                let um = (u.interpolate_in_slice(k, xm.as_slice())
                    + u.interpolate_in_slice(k + 1, xm.as_slice()))
                    * half;
                let v2 = problem.f(&xm, &um);
                let foot = grid.clamp((&x + &v2 * dt).as_slice());

                let pb = grid.cubic_stencil(foot.as_slice()).apply(&p_next, n);
                let ub = grid.stencil(foot.as_slice()).apply(u_next, u.components());
                let dub = grad_next.interpolate(grid, foot.as_slice());
                let db = total_derivatives(problem, &foot, &ub, &dub);
                let da = total_derivatives(problem, &x, &ua, &grad_here.at(node));

                // (I − dt/2 Aₐᵀ) pₐ = p_b − dt/2 (Gₐ + G_b − A_bᵀ p_b)
                let rhs = &pb - (&da.grad + &db.grad - db.jac.transpose() * &pb) * (dt * half);
                let lhs = DMatrix::identity(n, n) - da.jac.transpose() * (dt * half);
                let pa = if n == 1 {
                    rhs / lhs[(0, 0)]
                } else {
                    lhs.lu().solve(&rhs).ok_or_else(|| {
                        Error::Singular(format!("costate step matrix at t = {t_a}"))
                    })?
                };
                Ok((pa.as_slice().to_vec(), speed * dt / h_min))
            })
            .collect();

        let slice = p.slice_mut(k);
        for (node, r) in updates.into_iter().enumerate() {
            let (pa, courant) = r?;
            if pa.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp {
                    stage: "costate",
                    time: t_a.as_f64(),
                });
            }
            max_courant = max_courant.max(courant);
            slice[node * n..(node + 1) * n].copy_from_slice(&pa);
        }
        grad_next = grad_here;
    }
    if max_courant > T::one() {
        log::warn!(
            "costate: max |f|·dt/h = {max_courant:.3} exceeds 1; accuracy may suffer near fast characteristics"
        );
    }
    Ok(CostateField {
        field: p,
        max_courant,
    })
}
