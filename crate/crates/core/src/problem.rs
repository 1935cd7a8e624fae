//! Control problem abstraction and the built-in problem catalog.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type StateControlVec<T> = Arc<dyn Fn(&DVector<T>, &DVector<T>) -> DVector<T> + Send + Sync>;
pub type StateControlMat<T> = Arc<dyn Fn(&DVector<T>, &DVector<T>) -> DMatrix<T> + Send + Sync>;
pub type StateControlScalar<T> = Arc<dyn Fn(&DVector<T>, &DVector<T>) -> T + Send + Sync>;
pub type StateScalar<T> = Arc<dyn Fn(&DVector<T>) -> T + Send + Sync>;
pub type StateVec<T> = Arc<dyn Fn(&DVector<T>) -> DVector<T> + Send + Sync>;

/// Feasible set for the control variable.
#[derive(Clone, Debug, PartialEq)]
pub enum ConstraintSet<T> {
    Unconstrained,
    Box { lo: DVector<T>, hi: DVector<T> },
    Ball { center: DVector<T>, radius: T },
}

impl<T: Real> ConstraintSet<T> {
    pub fn bounds(lo: Vec<T>, hi: Vec<T>) -> Result<Self> {
        let set = ConstraintSet::Box {
            lo: DVector::from_vec(lo),
            hi: DVector::from_vec(hi),
        };
        set.validate(None)?;
        Ok(set)
    }

    pub fn ball(center: Vec<T>, radius: T) -> Result<Self> {
        let set = ConstraintSet::Ball {
            center: DVector::from_vec(center),
            radius,
        };
        set.validate(None)?;
        Ok(set)
    }

    pub fn validate(&self, control_dim: Option<usize>) -> Result<()> {
        let dim_ok = |d: usize| control_dim.map_or(true, |m| m == d);
        match self {
            ConstraintSet::Unconstrained => Ok(()),
            ConstraintSet::Box { lo, hi } => {
                if lo.len() != hi.len() || !dim_ok(lo.len()) {
                    return Err(Error::invalid("box constraint dimension mismatch"));
                }
                if lo.iter().zip(hi.iter()).any(|(l, h)| !(l.is_finite() && h.is_finite()) || l > h) {
                    return Err(Error::invalid("box constraint requires finite lo <= hi"));
                }
                Ok(())
            }
            ConstraintSet::Ball { center, radius } => {
                if !dim_ok(center.len()) {
                    return Err(Error::invalid("ball constraint dimension mismatch"));
                }
                if !(radius.is_finite() && *radius > T::zero()) {
                    return Err(Error::invalid("ball constraint requires radius > 0"));
                }
                Ok(())
            }
        }
    }

    pub fn is_unconstrained(&self) -> bool {
        matches!(self, ConstraintSet::Unconstrained)
    }

    pub fn is_compact(&self) -> bool {
        !self.is_unconstrained()
    }

    /// Exact membership test.
    pub fn contains(&self, v: &[T]) -> bool {
        match self {
            ConstraintSet::Unconstrained => true,
            ConstraintSet::Box { lo, hi } => v
                .iter()
                .enumerate()
                .all(|(i, &x)| x >= lo[i] && x <= hi[i]),
            ConstraintSet::Ball { center, radius } => ball_dist(v, center) <= *radius,
        }
    }

    pub fn project(&self, v: &DVector<T>) -> DVector<T> {
        let mut out = v.clone();
        self.project_in_place(out.as_mut_slice());
        out
    }

    /// Euclidean projection; the result always passes [`contains`](Self::contains).
    pub fn project_in_place(&self, v: &mut [T]) {
        match self {
            ConstraintSet::Unconstrained => {}
            ConstraintSet::Box { lo, hi } => {
                for (i, x) in v.iter_mut().enumerate() {
                    *x = x.max(lo[i]).min(hi[i]);
                }
            }
            ConstraintSet::Ball { center, radius } => {
                let dist = ball_dist(v, center);
                if dist <= *radius {
                    return;
                }
                let original: Vec<T> = v.to_vec();
                let mut shrink = T::zero();
                loop {
                    let scale = *radius / dist * (T::one() - shrink);
                    for (i, x) in v.iter_mut().enumerate() {
                        *x = center[i] + (original[i] - center[i]) * scale;
                    }
                    if ball_dist(v, center) <= *radius {
                        break;
                    }
                    // rounding left the point just outside
                    shrink = if shrink == T::zero() {
                        T::lit(4.0) * T::eps()
                    } else {
                        shrink + shrink
                    };
                }
            }
        }
    }
}

fn ball_dist<T: Real>(v: &[T], center: &DVector<T>) -> T {
    v.iter()
        .enumerate()
        .fold(T::zero(), |s, (i, &x)| s + (x - center[i]) * (x - center[i]))
        .sqrt()
}

/// Scalar function of one variable together with its derivative.
#[derive(Clone)]
pub struct ScalarMap<T> {
    name: String,
    value: Arc<dyn Fn(T) -> T + Send + Sync>,
    derivative: Arc<dyn Fn(T) -> T + Send + Sync>,
}

impl<T: Real> ScalarMap<T> {
    pub fn new(
        name: impl Into<String>,
        value: impl Fn(T) -> T + Send + Sync + 'static,
        derivative: impl Fn(T) -> T + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
            derivative: Arc::new(derivative),
        }
    }

    /// `x ↦ slope·x + intercept`
    pub fn linear(slope: T, intercept: T) -> Self {
        Self::new(
            format!("linear({slope}, {intercept})"),
            move |x| slope * x + intercept,
            move |_| slope,
        )
    }

    pub fn constant(c: T) -> Self {
        Self::new(format!("constant({c})"), move |_| c, |_| T::zero())
    }

    pub fn identity() -> Self {
        Self::linear(T::one(), T::zero())
    }

    /// `x ↦ amplitude·sin(frequency·x)`
    pub fn sine(amplitude: T, frequency: T) -> Self {
        Self::new(
            format!("sine({amplitude}, {frequency})"),
            move |x| amplitude * (frequency * x).sin(),
            move |x| amplitude * frequency * (frequency * x).cos(),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn value(&self, x: T) -> T {
        (self.value)(x)
    }

    #[inline]
    pub fn derivative(&self, x: T) -> T {
        (self.derivative)(x)
    }
}

impl<T> fmt::Debug for ScalarMap<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarMap").field("name", &self.name).finish()
    }
}

/// Dynamics `f`, running cost `F`, terminal cost `g`, control set `K`, and
/// the derivatives the costate and gradient computations need.
///
/// Row/column conventions: `f_x` is `N×N`, `f_u` is `N×m`, gradients are
/// column vectors.
#[derive(Clone)]
pub struct ControlProblem<T> {
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: T,
    pub dynamics: StateControlVec<T>,
    pub dynamics_jac_x: StateControlMat<T>,
    pub dynamics_jac_u: StateControlMat<T>,
    pub running_cost: StateControlScalar<T>,
    pub running_cost_grad_x: StateControlVec<T>,
    pub running_cost_grad_u: StateControlVec<T>,
    pub terminal_cost: StateScalar<T>,
    pub terminal_cost_grad: StateVec<T>,
    pub constraint: ConstraintSet<T>,
}

impl<T> fmt::Debug for ControlProblem<T>
where
    T: fmt::Debug,
{
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("horizon", &self.horizon)
            .field("constraint", &self.constraint)
            .finish_non_exhaustive()
    }
}

impl<T: Real> ControlProblem<T> {
    #[inline]
    pub fn f(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        (self.dynamics)(x, u)
    }

    #[inline]
    pub fn f_x(&self, x: &DVector<T>, u: &DVector<T>) -> DMatrix<T> {
        (self.dynamics_jac_x)(x, u)
    }

    #[inline]
    pub fn f_u(&self, x: &DVector<T>, u: &DVector<T>) -> DMatrix<T> {
        (self.dynamics_jac_u)(x, u)
    }

    #[inline]
    pub fn cost(&self, x: &DVector<T>, u: &DVector<T>) -> T {
        (self.running_cost)(x, u)
    }

    #[inline]
    pub fn cost_x(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        (self.running_cost_grad_x)(x, u)
    }

    #[inline]
    pub fn cost_u(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        (self.running_cost_grad_u)(x, u)
    }

    #[inline]
    pub fn g(&self, x: &DVector<T>) -> T {
        (self.terminal_cost)(x)
    }

    #[inline]
    pub fn g_grad(&self, x: &DVector<T>) -> DVector<T> {
        (self.terminal_cost_grad)(x)
    }

    /// Replaces the control set.
    pub fn with_constraint(mut self, constraint: ConstraintSet<T>) -> Result<Self> {
        constraint.validate(Some(self.control_dim))?;
        self.constraint = constraint;
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: T) -> Result<Self> {
        if !(horizon.is_finite() && horizon > T::zero()) {
            return Err(Error::invalid("horizon must be positive"));
        }
        self.horizon = horizon;
        Ok(self)
    }
}

/// Linear dynamics `Ax + Bu`, quadratic costs `Q`, `R` and terminal weight `H`.
#[derive(Clone, Debug, PartialEq)]
#[allow(non_snake_case)]
pub struct LqrSpec<T: Real> {
    pub A: DMatrix<T>,
    pub B: DMatrix<T>,
    pub Q: DMatrix<T>,
    pub R: DMatrix<T>,
    pub H: DMatrix<T>,
}

impl<T: Real> LqrSpec<T> {
    /// Scalar spec `x' = a x + b u`, cost `½q x² + ½r u²`, terminal `½h x²`.
    pub fn scalar(a: T, b: T, q: T, r: T, h: T) -> Self {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self {
            A: m(a),
            B: m(b),
            Q: m(q),
            R: m(r),
            H: m(h),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.A.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.B.ncols()
    }

    /// `B R⁻¹ Bᵀ`
    pub fn control_gramian(&self) -> Result<DMatrix<T>> {
        let r_inv = self
            .R
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("R must be symmetric positive definite"))?
            .inverse();
        Ok(&self.B * r_inv * self.B.transpose())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.control_dim();
        if n == 0 || m == 0 {
            return Err(Error::invalid("LQR dimensions must be positive"));
        }
        let shape = |name: &str, mat: &DMatrix<T>, r: usize, c: usize| {
            if mat.nrows() != r || mat.ncols() != c {
                Err(Error::invalid(format!(
                    "{name} must be {r}x{c}, got {}x{}",
                    mat.nrows(),
                    mat.ncols()
                )))
            } else if mat.iter().any(|v| !v.is_finite()) {
                Err(Error::invalid(format!("{name} has non-finite entries")))
            } else {
                Ok(())
            }
        };
        shape("A", &self.A, n, n)?;
        shape("B", &self.B, n, m)?;
        shape("Q", &self.Q, n, n)?;
        shape("R", &self.R, m, m)?;
        shape("H", &self.H, n, n)?;
        for (name, mat) in [("Q", &self.Q), ("R", &self.R), ("H", &self.H)] {
            if !is_symmetric(mat) {
                return Err(Error::invalid(format!("{name} must be symmetric")));
            }
        }
        for (name, mat) in [("Q", &self.Q), ("H", &self.H)] {
            if min_eigenvalue(mat) < -T::lit(1e-10) * (T::one() + mat.abs().max()) {
                return Err(Error::invalid(format!("{name} must be positive semidefinite")));
            }
        }
        let gram = self.control_gramian()?;
        if !is_well_posed_spd(&gram) {
            return Err(Error::Singular(
                "B R^-1 B^T is not invertible; the closed-form LQR formulas do not apply".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn is_symmetric<T: Real>(m: &DMatrix<T>) -> bool {
    let tol = T::lit(1e-12) * (T::one() + m.abs().max());
    (m - m.transpose()).abs().max() <= tol
}

pub(crate) fn min_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    let sym = (m + m.transpose()) * T::lit(0.5);
    sym.symmetric_eigenvalues().min()
}

/// Symmetric matrix that is positive definite with a usable condition number.
fn is_well_posed_spd<T: Real>(m: &DMatrix<T>) -> bool {
    let eig = ((m + m.transpose()) * T::lit(0.5)).symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    hi > T::zero() && lo > hi * T::lit(1e-12)
}

/// Folds the terminal weight into the running cost:
/// `F(x,u) = xᵀAᵀHx + uᵀBᵀHx + ½xᵀQx + ½uᵀRu`, `g ≡ 0`, `f = Ax + Bu`.
#[allow(non_snake_case)]
pub fn lqr_to_problem<T: Real>(spec: &LqrSpec<T>) -> Result<ControlProblem<T>> {
    spec.validate()?;
    let n = spec.state_dim();
    let m = spec.control_dim();
    let half = T::lit(0.5);
    let (A, B, Q, R, H) = (
        spec.A.clone(),
        spec.B.clone(),
        spec.Q.clone(),
        spec.R.clone(),
        spec.H.clone(),
    );
    let AtH = A.transpose() * &H;
    let BtH = B.transpose() * &H;
    let grad_x_mat = &AtH + AtH.transpose() + &Q;
    let HB = &H * &B;

    let (a1, b1) = (A.clone(), B.clone());
    let (a2, b2) = (A.clone(), B.clone());
    let (ath, bth, q, r) = (AtH.clone(), BtH.clone(), Q.clone(), R.clone());
    let (bth2, r2) = (BtH.clone(), R.clone());
    Ok(ControlProblem {
        name: "lqr".into(),
        state_dim: n,
        control_dim: m,
        horizon: T::one(),
        dynamics: Arc::new(move |x, u| &a1 * x + &b1 * u),
        dynamics_jac_x: Arc::new(move |_, _| a2.clone()),
        dynamics_jac_u: Arc::new(move |_, _| b2.clone()),
        running_cost: Arc::new(move |x, u| {
            x.dot(&(&ath * x)) + u.dot(&(&bth * x)) + half * x.dot(&(&q * x)) + half * u.dot(&(&r * u))
        }),
        running_cost_grad_x: Arc::new(move |x, u| &grad_x_mat * x + &HB * u),
        running_cost_grad_u: Arc::new(move |x, u| &bth2 * x + &r2 * u),
        terminal_cost: Arc::new(|_| T::zero()),
        terminal_cost_grad: Arc::new(move |_| DVector::zeros(n)),
        constraint: ConstraintSet::Unconstrained,
    })
}

/// LQR with the terminal weight kept as `g(x) = ½xᵀHx`.
#[allow(non_snake_case)]
pub fn lqr_problem_explicit_terminal<T: Real>(spec: &LqrSpec<T>) -> Result<ControlProblem<T>> {
    spec.validate()?;
    let n = spec.state_dim();
    let m = spec.control_dim();
    let half = T::lit(0.5);
    let (a1, b1, a2, b2) = (spec.A.clone(), spec.B.clone(), spec.A.clone(), spec.B.clone());
    let (q, r, q2, r2) = (spec.Q.clone(), spec.R.clone(), spec.Q.clone(), spec.R.clone());
    let (h, h2) = (spec.H.clone(), spec.H.clone());
    Ok(ControlProblem {
        name: "lqr-explicit-terminal".into(),
        state_dim: n,
        control_dim: m,
        horizon: T::one(),
        dynamics: Arc::new(move |x, u| &a1 * x + &b1 * u),
        dynamics_jac_x: Arc::new(move |_, _| a2.clone()),
        dynamics_jac_u: Arc::new(move |_, _| b2.clone()),
        running_cost: Arc::new(move |x, u| half * x.dot(&(&q * x)) + half * u.dot(&(&r * u))),
        running_cost_grad_x: Arc::new(move |x, _| &q2 * x),
        running_cost_grad_u: Arc::new(move |_, u| &r2 * u),
        terminal_cost: Arc::new(move |x| half * x.dot(&(&h * x))),
        terminal_cost_grad: Arc::new(move |x| &h2 * x),
        constraint: ConstraintSet::Unconstrained,
    })
}

/// Scalar problem `x' = drift(x) + u` with running cost `½u² − ½drift(x)²`.
pub fn academic_problem<T: Real>(drift: ScalarMap<T>, horizon: T) -> Result<ControlProblem<T>> {
    let half = T::lit(0.5);
    let d1 = drift.clone();
    let d2 = drift.clone();
    let d3 = drift.clone();
    let d4 = drift.clone();
    let problem = ControlProblem {
        name: format!("academic[{}]", drift.name()),
        state_dim: 1,
        control_dim: 1,
        horizon: T::one(),
        dynamics: Arc::new(move |x, u| DVector::from_element(1, d1.value(x[0]) + u[0])),
        dynamics_jac_x: Arc::new(move |x, _| DMatrix::from_element(1, 1, d2.derivative(x[0]))),
        dynamics_jac_u: Arc::new(|_, _| DMatrix::from_element(1, 1, T::one())),
        running_cost: Arc::new(move |x, u| {
            let fx = d3.value(x[0]);
            half * u[0] * u[0] - half * fx * fx
        }),
        running_cost_grad_x: Arc::new(move |x, _| {
            DVector::from_element(1, -d4.value(x[0]) * d4.derivative(x[0]))
        }),
        running_cost_grad_u: Arc::new(|_, u| u.clone()),
        terminal_cost: Arc::new(|_| T::zero()),
        terminal_cost_grad: Arc::new(|_| DVector::zeros(1)),
        constraint: ConstraintSet::Unconstrained,
    };
    problem.with_horizon(horizon)
}

/// Pure velocity control `x' = u` with zero cost; integrates a prescribed
/// velocity field with the flow machinery.
pub fn velocity_problem<T: Real>(dim: usize, horizon: T) -> Result<ControlProblem<T>> {
    ControlProblem {
        name: "velocity".into(),
        state_dim: dim,
        control_dim: dim,
        horizon: T::one(),
        dynamics: Arc::new(|_, u| u.clone()),
        dynamics_jac_x: Arc::new(move |_, _| DMatrix::zeros(dim, dim)),
        dynamics_jac_u: Arc::new(move |_, _| DMatrix::identity(dim, dim)),
        running_cost: Arc::new(|_, _| T::zero()),
        running_cost_grad_x: Arc::new(move |_, _| DVector::zeros(dim)),
        running_cost_grad_u: Arc::new(move |_, _| DVector::zeros(dim)),
        terminal_cost: Arc::new(|_| T::zero()),
        terminal_cost_grad: Arc::new(move |_| DVector::zeros(dim)),
        constraint: ConstraintSet::Unconstrained,
    }
    .with_horizon(horizon)
}

/// Worst relative mismatch between each derivative callback and central
/// differences of its base map.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeCheck {
    pub dynamics_jac_x: f64,
    pub dynamics_jac_u: f64,
    pub running_cost_grad_x: f64,
    pub running_cost_grad_u: f64,
    pub terminal_cost_grad: f64,
}

impl DerivativeCheck {
    pub fn worst(&self) -> f64 {
        [
            self.dynamics_jac_x,
            self.dynamics_jac_u,
            self.running_cost_grad_x,
            self.running_cost_grad_u,
            self.terminal_cost_grad,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn rel_err<T: Real>(got: T, want: T) -> f64 {
    let scale = T::one().max(got.abs()).max(want.abs());
    ((got - want).abs() / scale).as_f64()
}

/// Central-difference check of every derivative callback at `(x, u)`.
pub fn check_derivatives<T: Real>(
    problem: &ControlProblem<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    step: T,
) -> DerivativeCheck {
    let n = problem.state_dim;
    let m = problem.control_dim;
    let two_h = step + step;
    let perturb = |v: &DVector<T>, i: usize, s: T| {
        let mut w = v.clone();
        w[i] += s;
        w
    };
    let mut out = DerivativeCheck {
        dynamics_jac_x: 0.0,
        dynamics_jac_u: 0.0,
        running_cost_grad_x: 0.0,
        running_cost_grad_u: 0.0,
        terminal_cost_grad: 0.0,
    };
    let fx = problem.f_x(x, u);
    let fu = problem.f_u(x, u);
    let gx = problem.cost_x(x, u);
    let gu = problem.cost_u(x, u);
    let tg = problem.g_grad(x);
    for j in 0..n {
        let (xp, xm) = (perturb(x, j, step), perturb(x, j, -step));
        let df = (problem.f(&xp, u) - problem.f(&xm, u)) / two_h;
        for i in 0..n {
            out.dynamics_jac_x = out.dynamics_jac_x.max(rel_err(fx[(i, j)], df[i]));
        }
        let dc = (problem.cost(&xp, u) - problem.cost(&xm, u)) / two_h;
        out.running_cost_grad_x = out.running_cost_grad_x.max(rel_err(gx[j], dc));
        let dg = (problem.g(&xp) - problem.g(&xm)) / two_h;
        out.terminal_cost_grad = out.terminal_cost_grad.max(rel_err(tg[j], dg));
    }
    for j in 0..m {
        let (up, um) = (perturb(u, j, step), perturb(u, j, -step));
        let df = (problem.f(x, &up) - problem.f(x, &um)) / two_h;
        for i in 0..n {
            out.dynamics_jac_u = out.dynamics_jac_u.max(rel_err(fu[(i, j)], df[i]));
        }
        let dc = (problem.cost(x, &up) - problem.cost(x, &um)) / two_h;
        out.running_cost_grad_u = out.running_cost_grad_u.max(rel_err(gu[j], dc));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn random_spec(rng: &mut ChaCha8Rng, n: usize, m: usize) -> LqrSpec<f64> {
        let mut mat = |r, c| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let a = mat(n, n);
        let b = DMatrix::identity(n, m) + mat(n, m) * 0.3;
        let lq = mat(n, n);
        let lr = mat(m, m);
        let lh = mat(n, n);
        LqrSpec {
            A: a,
            B: b,
            Q: &lq * lq.transpose(),
            R: &lr * lr.transpose() + DMatrix::identity(m, m),
            H: &lh * lh.transpose() * 0.5,
        }
    }

    #[test]
    fn folded_lqr_without_terminal_weight() {
        let p = lqr_to_problem(&LqrSpec::scalar(0.0, 1.0, 1.0, 1.0, 0.0)).unwrap();
        let (x, u) = (v(&[0.7]), v(&[-1.3]));
        assert_abs_diff_eq!(p.cost(&x, &u), 0.5 * 0.49 + 0.5 * 1.69, epsilon = 1e-15);
        assert_eq!(p.f(&x, &u)[0], -1.3);
        assert_eq!(p.g(&x), 0.0);
    }

    #[test]
    fn folded_lqr_with_terminal_weight() {
        // F = x² + ux + ½u², f = x + u
        let p = lqr_to_problem(&LqrSpec::scalar(1.0, 1.0, 0.0, 1.0, 1.0)).unwrap();
        let (x, u) = (v(&[2.0]), v(&[3.0]));
        assert_abs_diff_eq!(p.cost(&x, &u), 4.0 + 6.0 + 4.5, epsilon = 1e-14);
        assert_eq!(p.f(&x, &u)[0], 5.0);
        assert_eq!(p.g_grad(&x)[0], 0.0);
    }

    #[test]
    fn singular_gramian_is_rejected() {
        let spec = LqrSpec {
            A: DMatrix::zeros(2, 2),
            B: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            Q: DMatrix::identity(2, 2),
            R: DMatrix::identity(1, 1),
            H: DMatrix::zeros(2, 2),
        };
        assert!(matches!(lqr_to_problem(&spec), Err(Error::Singular(_))));
    }

    #[test]
    fn indefinite_weights_are_rejected() {
        assert!(LqrSpec::scalar(0.0, 1.0, -1.0, 1.0, 0.0).validate().is_err());
        assert!(LqrSpec::scalar(0.0, 1.0, 1.0, 0.0, 0.0).validate().is_err());
        assert!(LqrSpec::scalar(0.0, 1.0, 1.0, 1.0, -0.5).validate().is_err());
    }

    #[test]
    fn academic_problem_values() {
        let p = academic_problem(ScalarMap::identity(), 1.0).unwrap();
        assert_abs_diff_eq!(p.cost(&v(&[1.0]), &v(&[2.0])), 1.5, epsilon = 1e-15);
        assert_eq!(p.f(&v(&[1.0]), &v(&[0.0]))[0], 1.0);
        let s = academic_problem(ScalarMap::sine(1.0, 2.0), 1.0).unwrap();
        assert_eq!(s.f(&v(&[0.4]), &v(&[0.0]))[0], (0.8f64).sin());
    }

    #[test]
    fn catalog_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut problems = vec![
            lqr_to_problem(&LqrSpec::scalar(0.3, 1.2, 1.0, 0.5, 0.7)).unwrap(),
            academic_problem(ScalarMap::sine(0.8, 1.7), 1.0).unwrap(),
            academic_problem(ScalarMap::linear(-1.0, 0.2), 1.0).unwrap(),
            velocity_problem(2, 1.0).unwrap(),
        ];
        for (n, m) in [(2, 2), (2, 3), (3, 3)] {
            let spec = random_spec(&mut rng, n, m);
            problems.push(lqr_to_problem(&spec).unwrap());
            problems.push(lqr_problem_explicit_terminal(&spec).unwrap());
        }
        for p in &problems {
            for _ in 0..100 {
                let x = DVector::from_fn(p.state_dim, |_, _| rng.gen_range(-2.0..2.0));
                let u = DVector::from_fn(p.control_dim, |_, _| rng.gen_range(-2.0..2.0));
                let check = check_derivatives(p, &x, &u, 1e-5);
                assert!(check.worst() <= 1e-5, "{}: {check:?}", p.name);
            }
        }
    }

    #[test]
    fn box_projection() {
        let k = ConstraintSet::bounds(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(k.project(&v(&[3.0, -1.0])), v(&[1.0, 0.0]));
        assert!(ConstraintSet::bounds(vec![1.0], vec![0.0]).is_err());
        assert!(ConstraintSet::ball(vec![0.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_feasible(
            a in -10.0f64..10.0, b in -10.0f64..10.0,
            cx in -1.0f64..1.0, cy in -1.0f64..1.0, r in 0.01f64..3.0,
        ) {
            let sets = [
                ConstraintSet::Unconstrained,
                ConstraintSet::bounds(vec![-0.5, -2.0], vec![0.5, 1.0]).unwrap(),
                ConstraintSet::ball(vec![cx, cy], r).unwrap(),
            ];
            let p = v(&[a, b]);
            for k in &sets {
                let once = k.project(&p);
                prop_assert!(k.contains(once.as_slice()));
                prop_assert_eq!(k.project(&once), once.clone());
                if k.contains(p.as_slice()) {
                    prop_assert_eq!(&once, &p);
                }
            }
        }

        #[test]
        fn convex_combinations_stay_in_set(
            a in prop::collection::vec(-3.0f64..3.0, 2),
            b in prop::collection::vec(-3.0f64..3.0, 2),
            eps in 0.0f64..=1.0,
        ) {
            let sets = [
                ConstraintSet::bounds(vec![-0.5, -2.0], vec![0.5, 1.0]).unwrap(),
                ConstraintSet::ball(vec![0.2, -0.1], 1.3).unwrap(),
            ];
            for k in &sets {
                let pa = k.project(&DVector::from_vec(a.clone()));
                let pb = k.project(&DVector::from_vec(b.clone()));
                let mut mix = &pa * (1.0 - eps) + &pb * eps;
                // convexity holds up to rounding; projection restores exact membership
                k.project_in_place(mix.as_mut_slice());
                prop_assert!(k.contains(mix.as_slice()));
                prop_assert!((&mix - (&pa * (1.0 - eps) + &pb * eps)).norm() < 1e-12);
            }
        }
    }
}
