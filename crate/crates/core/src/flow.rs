//! Closed-loop trajectories `x' = f(x, u(s, x))` and the cost functional
//! evaluated along them.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::problem::ControlProblem;
use crate::scalar::Real;

/// RK4 trajectory with endpoint and step-midpoint samples.
///
/// `mid_*[k]` lies halfway between `times[k]` and `times[k + 1]`.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<DVector<T>>,
    pub controls: Vec<DVector<T>>,
    pub mid_times: Vec<T>,
    pub mid_states: Vec<DVector<T>>,
    pub mid_controls: Vec<DVector<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn final_state(&self) -> &DVector<T> {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Composite Simpson rule for `h(s, x(s), u(s))` over the trajectory.
    pub fn simpson<H>(&self, mut h: H) -> T
    where
        H: FnMut(T, &DVector<T>, &DVector<T>) -> T,
    {
        let six = T::lit(6.0);
        let four = T::lit(4.0);
        let mut left = h(self.times[0], &self.states[0], &self.controls[0]);
        let mut total = T::zero();
        for k in 0..self.mid_times.len() {
            let mid = h(self.mid_times[k], &self.mid_states[k], &self.mid_controls[k]);
            let right = h(self.times[k + 1], &self.states[k + 1], &self.controls[k + 1]);
            total += (self.times[k + 1] - self.times[k]) / six * (left + four * mid + right);
            left = right;
        }
        total
    }
}

/// Initial condition `(t, y)` of one member of the cost family.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub t: T,
    pub y: DVector<T>,
}

impl<T: Real> Sample<T> {
    pub fn new(t: T, y: Vec<T>) -> Self {
        Self {
            t,
            y: DVector::from_vec(y),
        }
    }
}

/// Tensor lattice of initial states on `[lo, hi]` for every start time.
pub fn sample_lattice<T: Real>(lo: &[T], hi: &[T], nodes: &[usize], times: &[T]) -> Result<Vec<Sample<T>>> {
    let dim = lo.len();
    if hi.len() != dim || nodes.len() != dim || dim == 0 {
        return Err(Error::invalid("sample lattice dimension mismatch"));
    }
    if nodes.iter().any(|&n| n == 0) || times.is_empty() {
        return Err(Error::invalid("sample lattice must be nonempty"));
    }
    let axis = |a: usize, i: usize| {
        if nodes[a] == 1 {
            (lo[a] + hi[a]) * T::lit(0.5)
        } else {
            lo[a] + (hi[a] - lo[a]) * T::from_count(i) / T::from_count(nodes[a] - 1)
        }
    };
    let total: usize = nodes.iter().product();
    let mut out = Vec::with_capacity(total * times.len());
    for &t in times {
        for lin in 0..total {
            let mut rem = lin;
            let mut y = vec![T::zero(); dim];
            for a in (0..dim).rev() {
                y[a] = axis(a, rem % nodes[a]);
                rem /= nodes[a];
            }
            out.push(Sample::new(t, y));
        }
    }
    Ok(out)
}

/// Fixed-step RK4 on the field's time grid, starting at `(t, y)`.
///
/// Steps are aligned to the stored slices: a start between slices takes one
/// short step to the next slice, so restarting from any stored trajectory
/// point reproduces the tail exactly.
pub fn integrate_flow<T: Real>(
    problem: &ControlProblem<T>,
    field: &GridField<T>,
    t: T,
    y: &DVector<T>,
) -> Result<Trajectory<T>> {
    let tg = field.time_grid();
    if !(t >= tg.t0() && t <= tg.t_final()) {
        return Err(Error::invalid(format!(
            "start time {t} outside [{}, {}]",
            tg.t0(),
            tg.t_final()
        )));
    }
    if y.len() != problem.state_dim {
        return Err(Error::invalid("initial state has wrong dimension"));
    }
    let velocity = |s: T, x: &DVector<T>| -> (DVector<T>, DVector<T>) {
        let u = field.interpolate(s, x.as_slice());
        (problem.f(x, &u), u)
    };
    let half = T::lit(0.5);
    let sixth = T::one() / T::lit(6.0);
    let eighth = T::lit(0.125);

    let mut times = vec![t];
    let mut grid_times = Vec::new();
    // a start a rounding error below a node would otherwise get a ~1e-17 step
    let slack = tg.dt() * T::lit(1e-9);
    let first = tg.index_at_or_after(t);
    for k in first..=tg.steps() {
        let s = tg.time(k);
        if s > t + slack || (k == tg.steps() && s > t) {
            grid_times.push(s);
        }
    }
    times.extend(grid_times);

    let n_steps = times.len() - 1;
    let mut states = Vec::with_capacity(times.len());
    let mut controls = Vec::with_capacity(times.len());
    let mut mid_times = Vec::with_capacity(n_steps);
    let mut mid_states = Vec::with_capacity(n_steps);
    let mut mid_controls = Vec::with_capacity(n_steps);

    let mut x = y.clone();
    let (mut v, u) = velocity(t, &x);
    states.push(x.clone());
    controls.push(u);
    for k in 0..n_steps {
        let (s0, s1) = (times[k], times[k + 1]);
        let h = s1 - s0;
        let sm = s0 + h * half;
        let k1 = v.clone();
        let (k2, _) = velocity(sm, &(&x + &k1 * (h * half)));
        let (k3, _) = velocity(sm, &(&x + &k2 * (h * half)));
        let (k4, _) = velocity(s1, &(&x + &k3 * h));
        let next = &x + (k1.clone() + (k2 + k3) * T::lit(2.0) + k4) * (h * sixth);
        if next.iter().any(|c| !c.is_finite()) {
            return Err(Error::BlowUp {
                stage: "flow",
                time: s1.as_f64(),
            });
        }
        let (v_next, u_next) = velocity(s1, &next);
        // cubic Hermite midpoint from endpoint states and velocities
        let xm = (&x + &next) * half + (&k1 - &v_next) * (h * eighth);
        let um = field.interpolate(sm, xm.as_slice());
        mid_times.push(sm);
        mid_states.push(xm);
        mid_controls.push(um);
        states.push(next.clone());
        controls.push(u_next);
        x = next;
        v = v_next;
    }
    Ok(Trajectory {
        times,
        states,
        controls,
        mid_times,
        mid_states,
        mid_controls,
    })
}

/// `∫ₜᵀ F(x, u(s, x)) ds + g(x(T))` along the closed-loop trajectory.
pub fn cost_functional<T: Real>(
    problem: &ControlProblem<T>,
    field: &GridField<T>,
    t: T,
    y: &DVector<T>,
) -> Result<T> {
    let traj = integrate_flow(problem, field, t, y)?;
    Ok(trajectory_cost(problem, &traj))
}

pub fn trajectory_cost<T: Real>(problem: &ControlProblem<T>, traj: &Trajectory<T>) -> T {
    traj.simpson(|_, x, u| problem.cost(x, u)) + problem.g(traj.final_state())
}

/// Trajectories for every sample, evaluated in parallel, returned in sample order.
pub fn ensemble_trajectories<T: Real>(
    problem: &ControlProblem<T>,
    field: &GridField<T>,
    samples: &[Sample<T>],
) -> Result<Vec<Trajectory<T>>> {
    if samples.is_empty() {
        return Err(Error::invalid("ensemble needs at least one sample"));
    }
    samples
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            integrate_flow(problem, field, s.t, &s.y).map_err(|e| Error::SampleFailed {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Mean cost over the samples, summed in sample order.
pub fn ensemble_objective<T: Real>(
    problem: &ControlProblem<T>,
    field: &GridField<T>,
    samples: &[Sample<T>],
) -> Result<T> {
    let trajs = ensemble_trajectories(problem, field, samples)?;
    Ok(mean_cost(problem, &trajs))
}

pub(crate) fn mean_cost<T: Real>(problem: &ControlProblem<T>, trajs: &[Trajectory<T>]) -> T {
    let costs: Vec<T> = trajs.par_iter().map(|tr| trajectory_cost(problem, tr)).collect();
    let total = costs.iter().fold(T::zero(), |s, &c| s + c);
    total / T::from_count(costs.len())
}
