//! JSON run summary written as `summary.json` in the output directory.

use serde::{Deserialize, Serialize};

use crate::config::{ModeConfig, ProblemConfig, RunConfig, SCHEMA_VERSION};

/// Termination state of a run and its process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    Stalled,
    MaxIterations,
    BlowUp,
    ConfigError,
    Failed,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Converged => 0,
            RunStatus::Failed => 1,
            RunStatus::Stalled => 2,
            RunStatus::BlowUp => 3,
            RunStatus::ConfigError => 4,
            RunStatus::MaxIterations => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub name: String,
    pub problem: String,
    pub mode: String,
    pub status: RunStatus,
    pub exit_code: i32,
    /// Stage that failed, when the run did not reach a descent verdict.
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub workers: usize,
    pub samples: usize,
    pub iterations: usize,
    pub initial_objective: Option<f64>,
    pub final_objective: Option<f64>,
    pub final_residual: Option<f64>,
    /// Largest per-slice descent inner product over all iterations.
    pub max_slice_inner: Option<f64>,
    /// Largest increase of the objective between accepted iterates.
    pub max_objective_increase: Option<f64>,
    /// Largest relative gain error against the Riccati oracle.
    pub gain_error_vs_riccati: Option<f64>,
    pub gain_error_time: Option<f64>,
    /// Largest relative residual of the per-slice linear fit.
    pub gain_fit_residual: Option<f64>,
    pub oracle_residual: Option<f64>,
    pub gradient_check_worst_rel_err: Option<f64>,
    pub gradient_check_skipped: Option<usize>,
    /// Mean dynamic-programming value over the ensemble starts.
    pub dp_mean_value: Option<f64>,
    /// `|J − V̄| / |V̄|` with `J` the final ensemble objective.
    pub dp_relative_gap: Option<f64>,
    pub burgers_blowup_time: Option<f64>,
    /// Largest `|u − u*|` over the comparison box, `u*` from characteristics.
    pub burgers_max_error: Option<f64>,
    pub burgers_relative_error: Option<f64>,
    pub burgers_euler_lagrange_residual: Option<f64>,
    pub burgers_terminal_residual: Option<f64>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    pub elapsed_seconds: f64,
}

impl Summary {
    pub fn new(config: &RunConfig) -> Self {
        let problem = match &config.problem {
            ProblemConfig::Lqr { .. } => "lqr",
            ProblemConfig::Academic { .. } => "academic",
        };
        let mode = match config.descent.mode {
            ModeConfig::Obstacle => "obstacle",
            ModeConfig::Poisson => "poisson",
            ModeConfig::Pointwise => "pointwise",
        };
        Self {
            schema_version: SCHEMA_VERSION,
            name: config.name.clone(),
            problem: problem.into(),
            mode: mode.into(),
            status: RunStatus::Failed,
            exit_code: RunStatus::Failed.exit_code(),
            failed_stage: None,
            error: None,
            workers: 0,
            samples: 0,
            iterations: 0,
            initial_objective: None,
            final_objective: None,
            final_residual: None,
            max_slice_inner: None,
            max_objective_increase: None,
            gain_error_vs_riccati: None,
            gain_error_time: None,
            gain_fit_residual: None,
            oracle_residual: None,
            gradient_check_worst_rel_err: None,
            gradient_check_skipped: None,
            dp_mean_value: None,
            dp_relative_gap: None,
            burgers_blowup_time: None,
            burgers_max_error: None,
            burgers_relative_error: None,
            burgers_euler_lagrange_residual: None,
            burgers_terminal_residual: None,
            outputs: Vec::new(),
            elapsed_seconds: 0.0,
        }
    }

    pub fn set_status(&mut self, status: RunStatus) {
        self.status = status;
        self.exit_code = status.exit_code();
    }
}
