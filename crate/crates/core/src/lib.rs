//! Synthesis of optimal feedback maps `u(t, x)` on structured grids.
//!
//! The feedback itself is the unknown: each iteration transports the costate
//! backward along the closed-loop flow, forms the gradient
//! `∇I = F_u − p·f_u` at every node, and takes a per-slice descent direction
//! from an obstacle (or Poisson) problem in `x`. Independent oracles for LQR,
//! the academic Burgers example and grid dynamic programming live alongside.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`); the `*64` aliases
//! fix the common choice.

pub mod burgers;
pub mod costate;
pub mod descent;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod lqr;
pub mod obstacle;
pub mod oracles;
pub mod problem;
pub mod scalar;

pub use burgers::{burgers_eval, burgers_residual, verify_academic_feedback, BurgersSolution, NewtonSettings};
pub use costate::{solve_costate, CostateField};
pub use descent::{
    directional_derivative_check, gradient_field, run_descent, DescentConfig, DescentOutcome, DescentReport,
    DescentStatus, DirectionMode, GradientField,
};
pub use error::{Error, Result};
pub use flow::{ensemble_objective, integrate_flow, sample_lattice, Sample, Trajectory};
pub use grid::{spatial_gradient, GradientSlice, Grid, GridField, TimeGrid};
pub use lqr::{derive_lqr, solve_riccati, LqrDerived, MatrixPath, RiccatiSolution};
pub use obstacle::{poisson_direction, solve_obstacle_slice, SliceOperator, SolverSettings};
pub use problem::{ConstraintSet, ControlProblem, LqrSpec, ScalarMap};
pub use scalar::Real;

pub type Grid64 = Grid<f64>;
pub type TimeGrid64 = TimeGrid<f64>;
pub type GridField64 = GridField<f64>;
pub type ControlProblem64 = ControlProblem<f64>;
pub type LqrSpec64 = LqrSpec<f64>;
pub type Sample64 = Sample<f64>;
pub type DescentConfig64 = DescentConfig<f64>;
pub type BurgersSolution64 = BurgersSolution<f64>;
pub type RiccatiSolution64 = RiccatiSolution<f64>;
