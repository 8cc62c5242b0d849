//! TOML configuration file handling.
//!
//! The on-disk format groups the scenario fields into sections; see
//! `configs/default.toml` for a complete annotated example. All indices are
//! 0-based.

use serde::Deserialize;
use std::path::Path;

use qdc_core::discrete::KrausMode;
use qdc_core::engine::ScenarioConfig;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dims: DimsSection,
    pub behavior: BehaviorSection,
    pub utilities: UtilitiesSection,
    pub prior: PriorSection,
    pub observations: ObservationsSection,
    pub intervals: IntervalsSection,
    pub discretization: DiscretizationSection,
    pub coupling: CouplingSection,
    pub control: ControlSection,
    pub run: RunSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsSection {
    pub states: usize,
    pub actions: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSection {
    pub alpha: f64,
    pub lambda: f64,
    pub phi: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitiesSection {
    /// Rows per action, columns per state.
    pub table: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub pi0: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationsSection {
    pub obs_y: Vec<Vec<f64>>,
    pub obs_z: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalsSection {
    pub support: Vec<u32>,
    /// Defaults to uniform over the support.
    pub probs: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationSection {
    pub dt: f64,
    /// "paper-faithful" or "exact-cptp".
    pub mode: KrausMode,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    pub tilt: Vec<f64>,
    #[serde(default = "default_kick")]
    pub kick: f64,
    #[serde(default = "default_bound")]
    pub bound: f64,
}

fn default_kick() -> f64 {
    1.0
}

fn default_bound() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub target_action: usize,
    #[serde(default = "default_grid")]
    pub grid_size: usize,
    pub epsilon: f64,
}

fn default_grid() -> usize {
    41
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub horizon: u64,
    pub ensemble: usize,
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub fidelity_threshold: f64,
    #[serde(default = "default_lambda_factors")]
    pub lambda_factors: Vec<f64>,
    #[serde(default)]
    pub use_z: bool,
}

fn default_threshold() -> f64 {
    0.99
}

fn default_lambda_factors() -> Vec<f64> {
    vec![1.5, 2.0, 4.0]
}

impl FileConfig {
    pub fn into_scenario_config(self) -> ScenarioConfig {
        let interval_probs = self.intervals.probs.unwrap_or_else(|| {
            let n = self.intervals.support.len().max(1);
            vec![1.0 / n as f64; n]
        });
        ScenarioConfig {
            states: self.dims.states,
            actions: self.dims.actions,
            alpha: self.behavior.alpha,
            lambda: self.behavior.lambda,
            phi: self.behavior.phi,
            utilities: self.utilities.table,
            prior: self.prior.pi0,
            obs_y: self.observations.obs_y,
            obs_z: self.observations.obs_z,
            interval_support: self.intervals.support,
            interval_probs,
            dt: self.discretization.dt,
            mode: self.discretization.mode,
            coupling_tilt: self.coupling.tilt,
            coupling_kick: self.coupling.kick,
            control_bound: self.coupling.bound,
            target_action: self.control.target_action,
            horizon: self.run.horizon,
            ensemble: self.run.ensemble,
            base_seed: self.run.seed,
            epsilon: self.control.epsilon,
            lambda_factors: self.run.lambda_factors,
            fidelity_threshold: self.run.fidelity_threshold,
            grid_size: self.control.grid_size,
            use_z: self.run.use_z,
        }
    }
}

/// Parse error carrying enough context for the exit-code contract.
#[derive(Debug)]
pub enum ConfigError {
    Read { path: String, detail: String },
    Parse { path: String, detail: String },
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Read { path, detail } => {
                write!(f, "cannot read config file {path}: {detail}")
            }
            ConfigError::Parse { path, detail } => {
                write!(f, "cannot parse config file {path}: {detail}")
            }
        }
    }
}

/// Load a scenario configuration and the raw bytes (for hashing).
pub fn load_config(path: &Path) -> Result<(ScenarioConfig, Vec<u8>), ConfigError> {
    let bytes = std::fs::read(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| ConfigError::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let file: FileConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok((file.into_scenario_config(), bytes))
}
