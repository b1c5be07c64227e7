//! Experiment definitions as JSON documents.
//!
//! Field names mirror [`ExperimentConfig`]; unknown keys are rejected and
//! every error names the offending field path.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Scheme, StepConfig};
use crate::error::{EkiError, Result};
use crate::forward::{cells_for_mesh_width, equispaced_points};
use crate::model::InflationSchedule;

/// Mesh resolution: either a cell count or a target mesh width, in which
/// case the cell count is `ceil(π / width)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Mesh {
    Cells(usize),
    Width(f64),
}

/// Observation points inside `(0, π)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Observations {
    /// `x_k = k · spacing`, `k = 1..=count`.
    Spaced {
        count: usize,
        spacing: f64,
    },
    /// `x_k = k π / (count + 1)`, `k = 1..=count`.
    Uniform {
        count: usize,
    },
    Points {
        points: Vec<f64>,
    },
}

impl Observations {
    pub fn points(&self) -> Vec<f64> {
        match self {
            Self::Spaced { count, spacing } => equispaced_points(*count, *spacing),
            Self::Uniform { count } => equispaced_points(*count, PI / (*count as f64 + 1.0)),
            Self::Points { points } => points.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardConfig {
    pub mesh: Mesh,
    pub observations: Observations,
    /// Observational noise covariance is `noise_std² · I`.
    pub noise_std: f64,
}

impl ForwardConfig {
    pub fn n_cells(&self) -> usize {
        match self.mesh {
            Mesh::Cells(n) => n,
            Mesh::Width(h) => cells_for_mesh_width(h),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub beta: f64,
    /// Number of Karhunen–Loève modes; defaults to the parameter dimension.
    #[serde(default)]
    pub modes: Option<usize>,
}

/// Inflation `B / (t^α + R)` with `B = b_scale · I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InflationConfig {
    pub alpha: f64,
    pub r: f64,
    #[serde(default = "one")]
    pub b_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMode {
    /// `u†` drawn once from the prior, `y = A u†`.
    #[default]
    SyntheticTruth,
    /// `y` taken from the `data` field; no truth is known.
    GivenData,
}

/// Layout of the generated checkpoint grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSpacing {
    /// Steps `round(i·N/n)`.
    #[default]
    Uniform,
    /// Step 0 followed by steps `round(N^{i/n})`, duplicates removed. Gives
    /// log-log fits equal weight per decade.
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    pub dt: f64,
    #[serde(default)]
    pub inflation: Option<InflationConfig>,
    pub forward: ForwardConfig,
    pub prior: PriorConfig,
    pub ensemble_size: usize,
    pub paths: usize,
    pub horizon: f64,
    /// Explicit checkpoint times; each must be a multiple of `dt`.
    #[serde(default)]
    pub checkpoints: Option<Vec<f64>>,
    /// Number of intervals of the generated checkpoint grid used when
    /// `checkpoints` is absent.
    #[serde(default = "default_n_checkpoints")]
    pub n_checkpoints: usize,
    #[serde(default)]
    pub checkpoint_spacing: CheckpointSpacing,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub truth_mode: TruthMode,
    #[serde(default)]
    pub data: Option<Vec<f64>>,
    /// Share one initial ensemble across all paths instead of drawing one
    /// per path.
    #[serde(default)]
    pub fix_initial_ensemble: bool,
    /// Keep every path's records in the experiment output.
    #[serde(default)]
    pub keep_paths: bool,
    /// Window for late-time rate fits; defaults to `[T/10, T]`.
    #[serde(default)]
    pub rate_window: Option<(f64, f64)>,
}

fn one() -> f64 {
    1.0
}

fn default_n_checkpoints() -> usize {
    100
}

fn default_p() -> f64 {
    2.0
}

fn config_error(field: &str, message: impl Into<String>) -> EkiError {
    EkiError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.step_config()?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(config_error("horizon", "must be positive"));
        }
        self.total_steps()?;
        if self.paths == 0 {
            return Err(config_error("paths", "need at least one path"));
        }
        if self.ensemble_size < 2 {
            return Err(config_error("ensemble_size", "need at least 2 particles"));
        }
        if !(self.p >= 2.0 && self.p.is_finite()) {
            return Err(config_error("p", "moment order must be at least 2"));
        }
        let n_cells = self.forward.n_cells();
        if n_cells < 2 {
            return Err(config_error("forward.mesh", "need at least 2 cells"));
        }
        if !(self.forward.noise_std > 0.0 && self.forward.noise_std.is_finite()) {
            return Err(config_error("forward.noise_std", "must be positive"));
        }
        let points = self.forward.observations.points();
        if points.is_empty() {
            return Err(config_error(
                "forward.observations",
                "need at least one observation point",
            ));
        }
        if points.iter().any(|&x| !(x > 0.0 && x < PI)) || points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_error(
                "forward.observations",
                "points must be strictly increasing inside (0, π)",
            ));
        }
        if !(self.prior.beta >= 0.0 && self.prior.beta.is_finite()) {
            return Err(config_error("prior.beta", "must be nonnegative"));
        }
        let modes = self.modes();
        if modes == 0 || modes > n_cells - 1 {
            return Err(config_error("prior.modes", format!("must lie in 1..={}", n_cells - 1)));
        }
        if self.ensemble_size > modes {
            return Err(config_error(
                "ensemble_size",
                format!("{} particles exceed the {modes} prior modes", self.ensemble_size),
            ));
        }
        if self.n_checkpoints == 0 {
            return Err(config_error("n_checkpoints", "must be positive"));
        }
        self.checkpoint_steps()?;
        match (self.truth_mode, &self.data) {
            (TruthMode::GivenData, None) => return Err(config_error("data", "required when truth_mode = given_data")),
            (TruthMode::GivenData, Some(y)) if y.len() != points.len() => {
                return Err(config_error(
                    "data",
                    format!("expected {} values, got {}", points.len(), y.len()),
                ))
            }
            (TruthMode::SyntheticTruth, Some(_)) => {
                return Err(config_error("data", "only allowed when truth_mode = given_data"))
            }
            _ => {}
        }
        if let Some((lo, hi)) = self.rate_window {
            if !(lo > 0.0 && lo < hi && hi <= self.horizon) {
                return Err(config_error("rate_window", "need 0 < lo < hi <= horizon"));
            }
        }
        Ok(())
    }

    pub fn modes(&self) -> usize {
        self.prior.modes.unwrap_or(self.forward.n_cells().saturating_sub(1))
    }

    pub fn step_config(&self) -> Result<StepConfig> {
        let inflation = match (&self.inflation, self.scheme.is_inflated()) {
            (Some(c), true) => {
                let d = self.forward.n_cells().saturating_sub(1).max(1);
                Some(
                    InflationSchedule::scaled_identity(d, c.alpha, c.r, c.b_scale)
                        .map_err(|e| config_error("inflation", e.to_string()))?,
                )
            }
            (Some(_), false) => return Err(config_error("inflation", "only allowed with inflated schemes")),
            (None, true) => return Err(config_error("inflation", "required by inflated schemes")),
            (None, false) => None,
        };
        StepConfig::new(self.dt, self.scheme, inflation).map_err(|e| config_error("dt", e.to_string()))
    }

    /// Number of steps `T / dt`, which must be an integer up to rounding.
    pub fn total_steps(&self) -> Result<usize> {
        steps_for(self.horizon, self.dt).ok_or_else(|| config_error("horizon", "must be a multiple of dt"))
    }

    /// Step indices at which diagnostics are recorded, strictly increasing.
    pub fn checkpoint_steps(&self) -> Result<Vec<usize>> {
        let total = self.total_steps()?;
        match &self.checkpoints {
            None => {
                let n = self.n_checkpoints;
                let mut steps: Vec<usize> = match self.checkpoint_spacing {
                    CheckpointSpacing::Uniform => (0..=n).map(|i| (i * total + n / 2) / n).collect(),
                    CheckpointSpacing::Log => std::iter::once(0)
                        .chain((0..=n).map(|i| (total as f64).powf(i as f64 / n as f64).round() as usize))
                        .collect(),
                };
                steps.dedup();
                Ok(steps)
            }
            Some(times) => {
                if times.is_empty() {
                    return Err(config_error("checkpoints", "must not be empty"));
                }
                let mut steps = Vec::with_capacity(times.len());
                for (i, &t) in times.iter().enumerate() {
                    let field = format!("checkpoints[{i}]");
                    if !(0.0..=self.horizon).contains(&t) {
                        return Err(config_error(&field, "must lie in [0, horizon]"));
                    }
                    let s = steps_for(t, self.dt).ok_or_else(|| config_error(&field, "must be a multiple of dt"))?;
                    if steps.last().is_some_and(|&prev| s <= prev) {
                        return Err(config_error(&field, "checkpoints must be strictly increasing"));
                    }
                    steps.push(s);
                }
                Ok(steps)
            }
        }
    }

    /// Late-time fitting window, `[T/10, T]` unless configured.
    pub fn rate_window(&self) -> (f64, f64) {
        self.rate_window.unwrap_or((self.horizon / 10.0, self.horizon))
    }
}

fn steps_for(t: f64, dt: f64) -> Option<usize> {
    let n = (t / dt).round();
    if (n * dt - t).abs() <= 1e-9 * t.max(dt) {
        Some(n as usize)
    } else {
        None
    }
}
