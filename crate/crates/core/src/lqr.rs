//! Closed-form LQR oracle.
//!
//! With `C = (BR⁻¹Bᵀ)⁻¹`, `D = H − CA`, `E = Q + AᵀCA` the optimal feedback
//! is `u(t, y) = R⁻¹BᵀC (F(t) − A) y`, where `F` solves
//!
//! ```text
//! F′ + F² + C⁻¹(D − Dᵀ) F = C⁻¹E,   F(T) = −C⁻¹D.
//! ```
//!
//! The skew term vanishes whenever `CA` is symmetric. A classical Riccati
//! integrator for `P` (gain `−R⁻¹BᵀP`) is kept as an independent check.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridField, TimeGrid};
use crate::problem::LqrSpec;
use crate::scalar::Real;

#[derive(Clone, Debug)]
#[allow(non_snake_case)]
pub struct LqrDerived<T: Real> {
    pub C: DMatrix<T>,
    pub D: DMatrix<T>,
    pub E: DMatrix<T>,
    /// `C⁻¹`, i.e. `BR⁻¹Bᵀ`.
    pub C_inv: DMatrix<T>,
}

#[allow(non_snake_case)]
pub fn derive_lqr<T: Real>(spec: &LqrSpec<T>) -> Result<LqrDerived<T>> {
    spec.validate()?;
    let C_inv = spec.control_gramian()?;
    let C = C_inv
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("B R⁻¹ Bᵀ is not positive definite".into()))?
        .inverse();
    let C = (&C + C.transpose()) * T::lit(0.5);
    let D = &spec.H - &C * &spec.A;
    let E = &spec.Q + spec.A.transpose() * &C * &spec.A;
    let E = (&E + E.transpose()) * T::lit(0.5);
    Ok(LqrDerived { C, D, E, C_inv })
}

/// Matrix trajectory on a time grid, one entry per node.
#[derive(Clone, Debug)]
pub struct MatrixPath<T: Real> {
    time_grid: TimeGrid<T>,
    values: Vec<DMatrix<T>>,
}

impl<T: Real> MatrixPath<T> {
    /// One square matrix per time node, all of the same size.
    pub fn new(time_grid: TimeGrid<T>, values: Vec<DMatrix<T>>) -> Result<Self> {
        if values.len() != time_grid.steps() + 1 {
            return Err(Error::invalid("matrix path needs one matrix per time node"));
        }
        let shape = values[0].shape();
        if shape.0 != shape.1 || values.iter().any(|m| m.shape() != shape) {
            return Err(Error::invalid("matrix path entries must be square and equally sized"));
        }
        Ok(Self { time_grid, values })
    }

    pub fn time_grid(&self) -> &TimeGrid<T> {
        &self.time_grid
    }

    pub fn values(&self) -> &[DMatrix<T>] {
        &self.values
    }

    /// Linear interpolation between nodes; exact at nodes.
    pub fn at(&self, t: T) -> DMatrix<T> {
        let (k, frac) = self.time_grid.locate(t);
        if frac == T::zero() || k + 1 >= self.values.len() {
            return self.values[k.min(self.values.len() - 1)].clone();
        }
        &self.values[k] * (T::one() - frac) + &self.values[k + 1] * frac
    }
}

/// Solution `F(t)` of the Riccati-type system.
pub type RiccatiSolution<T> = MatrixPath<T>;

fn rk4_backward<T: Real>(
    stage: &'static str,
    t_final: T,
    steps: usize,
    terminal: DMatrix<T>,
    rhs: impl Fn(&DMatrix<T>) -> DMatrix<T>,
) -> Result<MatrixPath<T>> {
    if steps < 10 {
        return Err(Error::invalid("Riccati integration needs at least 10 steps"));
    }
    let tg = TimeGrid::new(T::zero(), t_final, steps)?;
    let mut values = vec![DMatrix::zeros(0, 0); steps + 1];
    values[steps] = terminal;
    let half = T::lit(0.5);
    let sixth = T::one() / T::lit(6.0);
    for k in (0..steps).rev() {
        let h = tg.time(k) - tg.time(k + 1);
        let y = &values[k + 1];
        let k1 = rhs(y);
        let k2 = rhs(&(y + &k1 * (h * half)));
        let k3 = rhs(&(y + &k2 * (h * half)));
        let k4 = rhs(&(y + &k3 * h));
        let next = y + (k1 + k2 * T::lit(2.0) + k3 * T::lit(2.0) + k4) * (h * sixth);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                stage,
                time: tg.time(k).as_f64(),
            });
        }
        values[k] = next;
    }
    Ok(MatrixPath { time_grid: tg, values })
}

/// RK4 integration of `F` backward from `T` to `0`.
pub fn solve_riccati<T: Real>(derived: &LqrDerived<T>, t_final: T, steps: usize) -> Result<RiccatiSolution<T>> {
    let source = &derived.C_inv * &derived.E;
    let skew = &derived.C_inv * (&derived.D - derived.D.transpose());
    let terminal = -(&derived.C_inv * &derived.D);
    rk4_backward("riccati", t_final, steps, terminal, |f| &source - f * f - &skew * f)
}

/// Classical `−P′ = AᵀP + PA + Q − PBR⁻¹BᵀP`, `P(T) = H`.
pub fn solve_classical_riccati<T: Real>(spec: &LqrSpec<T>, t_final: T, steps: usize) -> Result<MatrixPath<T>> {
    spec.validate()?;
    let s = spec.control_gramian()?;
    let a = spec.A.clone();
    let q = spec.Q.clone();
    rk4_backward("classical riccati", t_final, steps, spec.H.clone(), move |p| {
        -(a.transpose() * p + p * &a + &q - p * &s * p)
    })
}

fn r_inv_bt<T: Real>(spec: &LqrSpec<T>) -> Result<DMatrix<T>> {
    let chol = spec
        .R
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("R is not positive definite".into()))?;
    Ok(chol.solve(&spec.B.transpose()))
}

/// Gain `K(t) = R⁻¹BᵀC (F(t) − A)`, so that `u = K(t) y`.
pub fn lqr_gain<T: Real>(spec: &LqrSpec<T>, derived: &LqrDerived<T>, riccati: &RiccatiSolution<T>, t: T) -> Result<DMatrix<T>> {
    Ok(r_inv_bt(spec)? * &derived.C * (riccati.at(t) - &spec.A))
}

/// Gain `−R⁻¹BᵀP(t)` from the classical solution.
pub fn classical_gain<T: Real>(spec: &LqrSpec<T>, classical: &MatrixPath<T>, t: T) -> Result<DMatrix<T>> {
    Ok(-(r_inv_bt(spec)? * classical.at(t)))
}

pub fn lqr_feedback<T: Real>(
    spec: &LqrSpec<T>,
    derived: &LqrDerived<T>,
    riccati: &RiccatiSolution<T>,
    t: T,
    y: &DVector<T>,
) -> Result<DVector<T>> {
    Ok(lqr_gain(spec, derived, riccati, t)? * y)
}

/// Samples the optimal feedback on every node and slice.
pub fn lqr_feedback_field<T: Real>(
    spec: &LqrSpec<T>,
    riccati: &RiccatiSolution<T>,
    grid: &Grid<T>,
    time_grid: &TimeGrid<T>,
) -> Result<GridField<T>> {
    if grid.dim() != spec.state_dim() {
        return Err(Error::invalid("grid dimension differs from state dimension"));
    }
    let derived = derive_lqr(spec)?;
    let gains: Vec<DMatrix<T>> = time_grid
        .times()
        .into_iter()
        .map(|t| lqr_gain(spec, &derived, riccati, t))
        .collect::<Result<_>>()?;
    let m = spec.control_dim();
    let mut field = GridField::zeros(grid.clone(), time_grid.clone(), m);
    for (k, gain) in gains.iter().enumerate() {
        let slice = field.slice_mut(k);
        for node in 0..grid.len() {
            let u = gain * grid.node_coords(node);
            slice[node * m..(node + 1) * m].copy_from_slice(u.as_slice());
        }
    }
    Ok(field)
}

/// Largest relative gap between the two gain formulas over the nodes.
pub fn gain_discrepancy<T: Real>(
    spec: &LqrSpec<T>,
    derived: &LqrDerived<T>,
    riccati: &RiccatiSolution<T>,
    classical: &MatrixPath<T>,
) -> Result<T> {
    let mut worst = T::zero();
    for t in riccati.time_grid().times() {
        let a = lqr_gain(spec, derived, riccati, t)?;
        let b = classical_gain(spec, classical, t)?;
        let scale = b.norm().max(T::one());
        worst = worst.max((a - b).norm() / scale);
    }
    Ok(worst)
}

/// Least-squares gain `K` with `u ≈ K x` over the nodes of one slice.
#[derive(Clone, Debug)]
pub struct GainFit<T: Real> {
    pub gain: DMatrix<T>,
    /// `‖U − K X‖ / ‖U‖` over the fitted nodes (0 when `U` vanishes).
    pub relative_residual: T,
    pub nodes: usize,
}

/// Fits `u(t_k, x) ≈ K x` over the grid nodes inside `[lo, hi]`.
pub fn fit_linear_gain<T: Real>(field: &GridField<T>, k: usize, lo: &[T], hi: &[T]) -> Result<GainFit<T>> {
    let grid = field.grid();
    let n = grid.dim();
    let m = field.components();
    if lo.len() != n || hi.len() != n {
        return Err(Error::invalid("fit box dimension differs from grid dimension"));
    }
    let mut xtx = DMatrix::<T>::zeros(n, n);
    let mut xtu = DMatrix::<T>::zeros(n, m);
    let mut picked = Vec::new();
    for node in 0..grid.len() {
        let x = grid.node_coords(node);
        if (0..n).all(|a| x[a] >= lo[a] && x[a] <= hi[a]) {
            let u = field.node_vector(k, node);
            xtx += &x * x.transpose();
            xtu += &x * u.transpose();
            picked.push((x, u));
        }
    }
    if picked.len() < n {
        return Err(Error::invalid("fit box holds too few nodes"));
    }
    let kt = xtx
        .lu()
        .solve(&xtu)
        .ok_or_else(|| Error::Singular("gain fit normal equations".into()))?;
    let gain = kt.transpose();
    let (mut res, mut norm) = (T::zero(), T::zero());
    for (x, u) in &picked {
        res += (u - &gain * x).norm_squared();
        norm += u.norm_squared();
    }
    let relative_residual = if norm > T::zero() { (res / norm).sqrt() } else { T::zero() };
    Ok(GainFit {
        gain,
        relative_residual,
        nodes: picked.len(),
    })
}

/// Worst per-slice agreement between fitted and optimal gains.
#[derive(Clone, Debug)]
pub struct GainComparison<T: Real> {
    /// Largest `‖K_fit − K‖ / ‖K‖` over compared slices.
    pub worst_relative_error: T,
    pub worst_time: T,
    /// Largest linear-fit residual over compared slices.
    pub worst_fit_residual: T,
    pub slices: usize,
}

/// Compares slices with `t ≤ t_max` against the Riccati gain.
pub fn compare_with_riccati<T: Real>(
    spec: &LqrSpec<T>,
    riccati: &RiccatiSolution<T>,
    field: &GridField<T>,
    lo: &[T],
    hi: &[T],
    t_max: T,
) -> Result<GainComparison<T>> {
    let derived = derive_lqr(spec)?;
    let tg = field.time_grid();
    let mut out = GainComparison {
        worst_relative_error: T::zero(),
        worst_time: tg.t0(),
        worst_fit_residual: T::zero(),
        slices: 0,
    };
    for k in 0..=tg.steps() {
        let t = tg.time(k);
        if t > t_max + tg.dt() * T::lit(1e-9) {
            break;
        }
        let fit = fit_linear_gain(field, k, lo, hi)?;
        let exact = lqr_gain(spec, &derived, riccati, t)?;
        let scale = exact.norm();
        if scale == T::zero() {
            return Err(Error::invalid(format!("optimal gain vanishes at t = {t}")));
        }
        let err = (&fit.gain - &exact).norm() / scale;
        if err > out.worst_relative_error || out.slices == 0 {
            out.worst_relative_error = err;
            out.worst_time = t;
        }
        out.worst_fit_residual = out.worst_fit_residual.max(fit.relative_residual);
        out.slices += 1;
    }
    if out.slices == 0 {
        return Err(Error::invalid("no slice at or before t_max"));
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests_support {
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use crate::problem::LqrSpec;

    pub fn random_spec(rng: &mut ChaCha8Rng) -> LqrSpec<f64> {
        let mut m = |n: usize, s: f64| DMatrix::from_fn(n, n, |_, _| rng.gen_range(-s..s));
        let a = m(2, 1.0);
        let b = DMatrix::identity(2, 2) + m(2, 0.3);
        let lq = m(2, 1.0);
        let lr = m(2, 0.3);
        let lh = m(2, 0.7);
        LqrSpec {
            A: a,
            B: b,
            Q: &lq * lq.transpose() + DMatrix::identity(2, 2) * 0.1,
            R: &lr * lr.transpose() + DMatrix::identity(2, 2),
            H: &lh * lh.transpose(),
        }
    }
}
