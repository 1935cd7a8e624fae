//! Exhaustive, ordered config checks; an empty list means `run` would start.

use std::fmt;

use crate::config::{
    BoxConfig, ConstraintConfig, DriftConfig, InitialField, ModeConfig, ProblemConfig, RunConfig, SCHEMA_VERSION,
};
use crate::pipeline::lqr_spec;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Dotted path of the offending key, e.g. `descent.tol`.
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

struct Checker(Vec<Violation>);

impl Checker {
    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.0.push(Violation {
            field: field.into(),
            message: message.into(),
        });
    }

    fn positive(&mut self, field: &str, v: f64) {
        if !(v.is_finite() && v > 0.0) {
            self.push(field, format!("must be positive and finite (got {v})"));
        }
    }

    fn finite(&mut self, field: &str, values: &[f64]) {
        if values.iter().any(|v| !v.is_finite()) {
            self.push(field, "entries must be finite");
        }
    }

    fn dim(&mut self, field: &str, len: usize, expected: usize) -> bool {
        if len != expected {
            self.push(field, format!("has {len} entries, expected {expected}"));
            return false;
        }
        true
    }

    fn ordered_box(&mut self, field: &str, bx: &BoxConfig, dim: usize, strict: bool) {
        let lo_ok = self.dim(&format!("{field}.lo"), bx.lo.len(), dim);
        let hi_ok = self.dim(&format!("{field}.hi"), bx.hi.len(), dim);
        self.finite(&format!("{field}.lo"), &bx.lo);
        self.finite(&format!("{field}.hi"), &bx.hi);
        if lo_ok && hi_ok {
            let bad = bx.lo.iter().zip(&bx.hi).any(|(l, h)| if strict { l >= h } else { l > h });
            if bad {
                let rel = if strict { "below" } else { "at most" };
                self.push(field, format!("lo must be {rel} hi on every axis"));
            }
        }
    }

    fn matrix(&mut self, field: &str, m: &[Vec<f64>], rows: usize, cols: usize) {
        if m.len() != rows || m.iter().any(|r| r.len() != cols) {
            self.push(field, format!("must be a {rows}x{cols} matrix given as rows"));
        } else if m.iter().flatten().any(|v| !v.is_finite()) {
            self.push(field, "entries must be finite");
        }
    }
}

pub fn validate_config(config: &RunConfig) -> Vec<Violation> {
    let mut c = Checker(Vec::new());
    if config.schema_version != SCHEMA_VERSION {
        c.push(
            "schema_version",
            format!("unsupported version {} (expected {SCHEMA_VERSION})", config.schema_version),
        );
    }
    if config.output_dir.as_os_str().is_empty() {
        c.push("output_dir", "must not be empty");
    }

    let n = config.problem.state_dim();
    let m = config.problem.control_dim();
    let is_lqr = matches!(config.problem, ProblemConfig::Lqr { .. });
    match &config.problem {
        ProblemConfig::Lqr { a, b, q, r, h, horizon } => {
            if n == 0 || m == 0 {
                c.push("problem", "state and control dimensions must be positive");
            } else {
                c.matrix("problem.a", a, n, n);
                c.matrix("problem.b", b, n, m);
                c.matrix("problem.q", q, n, n);
                c.matrix("problem.r", r, m, m);
                c.matrix("problem.h", h, n, n);
            }
            c.positive("problem.horizon", *horizon);
            if c.0.iter().all(|v| !v.field.starts_with("problem")) {
                if let Err(e) = lqr_spec(&config.problem).and_then(|s| s.validate().map(|_| s)) {
                    c.push("problem", e.to_string());
                }
            }
        }
        ProblemConfig::Academic { drift, horizon } => {
            match drift {
                DriftConfig::Linear { slope, intercept } => c.finite("problem.drift", &[*slope, *intercept]),
                DriftConfig::Sine { amplitude, frequency } => c.finite("problem.drift", &[*amplitude, *frequency]),
            }
            c.positive("problem.horizon", *horizon);
        }
    }

    match &config.constraint {
        ConstraintConfig::None => {}
        ConstraintConfig::Box { lo, hi } => {
            c.ordered_box("constraint", &BoxConfig { lo: lo.clone(), hi: hi.clone() }, m, false);
        }
        ConstraintConfig::Ball { center, radius } => {
            c.dim("constraint.center", center.len(), m);
            c.finite("constraint.center", center);
            c.positive("constraint.radius", *radius);
        }
    }

    let g = &config.grid;
    c.ordered_box("grid", &BoxConfig { lo: g.lo.clone(), hi: g.hi.clone() }, n, true);
    if c.dim("grid.nodes", g.nodes.len(), n) && g.nodes.iter().any(|&k| k < 3) {
        c.push("grid.nodes", "every axis needs at least 3 nodes");
    }
    if g.steps == 0 {
        c.push("grid.steps", "must be at least 1");
    }

    let d = &config.descent;
    c.positive("descent.tol", d.tol);
    if d.max_iter == 0 {
        c.push("descent.max_iter", "must be at least 1");
    }
    c.positive("descent.eps_max", d.eps_max);
    c.positive("descent.eps_min", d.eps_min);
    if d.eps_min > d.eps_max {
        c.push("descent.eps_min", "exceeds descent.eps_max");
    }
    if !(d.eps_growth >= 1.0 && d.eps_growth.is_finite()) {
        c.push("descent.eps_growth", "must be at least 1");
    }
    if !(d.armijo_c1 > 0.0 && d.armijo_c1 < 1.0) {
        c.push("descent.armijo_c1", "must lie in (0, 1)");
    }
    if !(d.backtrack > 0.0 && d.backtrack < 1.0) {
        c.push("descent.backtrack", "must lie in (0, 1)");
    }
    c.positive("descent.slice_tol", d.slice_tol);
    if d.slice_max_iter == 0 {
        c.push("descent.slice_max_iter", "must be at least 1");
    }
    if d.pointwise_resolution < 2 {
        c.push("descent.pointwise_resolution", "must be at least 2");
    }
    let unconstrained = config.constraint == ConstraintConfig::None;
    match d.mode {
        ModeConfig::Poisson if !unconstrained => {
            c.push("descent.mode", "poisson mode requires an unconstrained control set");
        }
        ModeConfig::Pointwise if unconstrained => {
            c.push("descent.mode", "pointwise mode scans a bounded control set; add a box or ball constraint");
        }
        _ => {}
    }
    if d.mode != ModeConfig::Poisson && d.eps_max > 1.0 {
        c.push("descent.eps_max", "convex-combination updates need eps_max <= 1");
    }
    if d.initial == InitialField::Riccati && !is_lqr {
        c.push("descent.initial", "the Riccati start needs an lqr problem");
    }
    c.positive("descent.obstacle_step", d.obstacle_step);
    if let Some(a) = d.obstacle_mass {
        if !(a >= 0.0 && a.is_finite()) {
            c.push("descent.obstacle_mass", format!("must be finite and non-negative (got {a})"));
        }
    }
    if let Some(bx) = &d.measure_box {
        c.ordered_box("descent.measure_box", bx, n, false);
    }

    let e = &config.ensemble;
    c.ordered_box("ensemble", &BoxConfig { lo: e.lo.clone(), hi: e.hi.clone() }, n, false);
    if c.dim("ensemble.nodes", e.nodes.len(), n) && e.nodes.iter().any(|&k| k == 0) {
        c.push("ensemble.nodes", "every axis needs at least 1 node");
    }
    if e.start_times == 0 {
        c.push("ensemble.start_times", "must be at least 1");
    }

    let v = &config.verify;
    if let Some(r) = &v.riccati {
        if !is_lqr {
            c.push("verify.riccati", "needs an lqr problem");
        }
        c.ordered_box("verify.riccati.fit_box", &r.fit_box, n, true);
        if !(r.t_max_fraction > 0.0 && r.t_max_fraction <= 1.0) {
            c.push("verify.riccati.t_max_fraction", "must lie in (0, 1]");
        }
        if r.steps < 10 {
            c.push("verify.riccati.steps", "must be at least 10");
        }
    }
    if let Some(gc) = &v.gradient_check {
        if gc.directions == 0 {
            c.push("verify.gradient_check.directions", "must be at least 1");
        }
        c.positive("verify.gradient_check.eps_fd", gc.eps_fd);
    }
    if let Some(dp) = &v.dp {
        if n != 1 || m != 1 {
            c.push("verify.dp", "grid dynamic programming supports scalar state and control only");
        }
        if dp.state_nodes < 3 {
            c.push("verify.dp.state_nodes", "must be at least 3");
        }
        if dp.control_nodes < 2 {
            c.push("verify.dp.control_nodes", "must be at least 2");
        }
        if !(dp.control_lo.is_finite() && dp.control_hi.is_finite() && dp.control_lo < dp.control_hi) {
            c.push("verify.dp", "control_lo must be below control_hi");
        }
        if dp.steps == 0 {
            c.push("verify.dp.steps", "must be at least 1");
        }
    }
    if let Some(b) = &v.burgers {
        if is_lqr {
            c.push("verify.burgers", "needs an academic problem");
        }
        c.ordered_box("verify.burgers.compare_box", &b.compare_box, n, false);
    }
    c.0
}
