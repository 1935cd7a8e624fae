//! Run configuration: a versioned TOML document; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Free-form label copied into the summary.
    #[serde(default)]
    pub name: String,
    pub output_dir: PathBuf,
    /// Worker threads; 0 or absent means all available cores.
    #[serde(default)]
    pub workers: usize,
    /// Seeds the random bump directions of the gradient check.
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub constraint: ConstraintConfig,
    pub grid: GridConfig,
    pub descent: DescentSettings,
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// `x' = A x + B u`, cost `½xᵀQx + ½uᵀRu`, terminal `½xᵀHx`; matrices
    /// are lists of rows.
    Lqr {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
        h: Vec<Vec<f64>>,
        horizon: f64,
    },
    /// `x' = f(x) + u`, cost `½u² − ½f(x)²`.
    Academic { drift: DriftConfig, horizon: f64 },
}

impl ProblemConfig {
    pub fn horizon(&self) -> f64 {
        match self {
            ProblemConfig::Lqr { horizon, .. } | ProblemConfig::Academic { horizon, .. } => *horizon,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ProblemConfig::Lqr { a, .. } => a.len(),
            ProblemConfig::Academic { .. } => 1,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            ProblemConfig::Lqr { b, .. } => b.first().map_or(0, |row| row.len()),
            ProblemConfig::Academic { .. } => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftConfig {
    /// `slope·x + intercept`
    Linear { slope: f64, intercept: f64 },
    /// `amplitude·sin(frequency·x)`
    Sine { amplitude: f64, frequency: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConstraintConfig {
    #[default]
    None,
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeConfig {
    Obstacle,
    Poisson,
    Pointwise,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialField {
    #[default]
    Zero,
    /// The Riccati-optimal field (LQR only), clipped into the control set.
    Riccati,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescentSettings {
    pub mode: ModeConfig,
    #[serde(default)]
    pub initial: InitialField,
    pub tol: f64,
    pub max_iter: usize,
    #[serde(default = "defaults::eps_max")]
    pub eps_max: f64,
    #[serde(default = "defaults::eps_min")]
    pub eps_min: f64,
    #[serde(default = "defaults::eps_growth")]
    pub eps_growth: f64,
    #[serde(default = "defaults::armijo_c1")]
    pub armijo_c1: f64,
    #[serde(default = "defaults::backtrack")]
    pub backtrack: f64,
    #[serde(default = "defaults::slice_tol")]
    pub slice_tol: f64,
    #[serde(default = "defaults::slice_max_iter")]
    pub slice_max_iter: usize,
    #[serde(default = "defaults::pointwise_resolution")]
    pub pointwise_resolution: usize,
    /// Region where the stationarity residual is measured; whole grid if absent.
    #[serde(default)]
    pub measure_box: Option<BoxConfig>,
    /// Mass of the obstacle energy for bounded control sets; `(π / L)²` with
    /// `L` the largest grid extent if absent.
    #[serde(default)]
    pub obstacle_mass: Option<f64>,
    /// Proximal step of the obstacle problem; 1 is the plain functional.
    #[serde(default = "defaults::obstacle_step")]
    pub obstacle_step: f64,
}

mod defaults {
    pub fn eps_max() -> f64 {
        1.0
    }
    pub fn eps_min() -> f64 {
        1e-8
    }
    pub fn eps_growth() -> f64 {
        2.0
    }
    pub fn armijo_c1() -> f64 {
        1e-4
    }
    pub fn backtrack() -> f64 {
        0.5
    }
    pub fn slice_tol() -> f64 {
        1e-10
    }
    pub fn slice_max_iter() -> usize {
        100_000
    }
    pub fn obstacle_step() -> f64 {
        1.0
    }
    pub fn pointwise_resolution() -> usize {
        21
    }
    pub fn gain_t_max() -> f64 {
        0.9
    }
    pub fn eps_fd() -> f64 {
        1e-4
    }
}

/// Tensor lattice of initial states, repeated at evenly spaced start times
/// `t0 + i (T − t0) / start_times` for `i < start_times`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
    pub start_times: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default)]
    pub riccati: Option<RiccatiCheck>,
    #[serde(default)]
    pub gradient_check: Option<GradientCheckConfig>,
    #[serde(default)]
    pub dp: Option<DpCheck>,
    #[serde(default)]
    pub burgers: Option<BurgersCheck>,
}

/// Compares fitted linear gains with the Riccati gain (LQR only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiccatiCheck {
    pub fit_box: BoxConfig,
    /// Slices with `t ≤ t_max_fraction · T` are compared.
    #[serde(default = "defaults::gain_t_max")]
    pub t_max_fraction: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientCheckConfig {
    pub directions: usize,
    #[serde(default = "defaults::eps_fd")]
    pub eps_fd: f64,
}

/// Grid dynamic programming on the state grid box (scalar problems).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpCheck {
    pub state_nodes: usize,
    pub control_nodes: usize,
    pub control_lo: f64,
    pub control_hi: f64,
    pub steps: usize,
}

/// Compares the feedback with the characteristic solution (academic only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurgersCheck {
    pub compare_box: BoxConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Number of leading ensemble trajectories dumped under `trajectories/`.
    #[serde(default)]
    pub trajectories: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
