//! Experiment configuration: one JSON document drives the generate, train,
//! evaluate and report commands.
//!
//! Minimal file:
//!
//! ```json
//! {
//!   "scenarios": ["scenarios/hallway-two-way.json"],
//!   "seeds": [0, 1, 2],
//!   "priors": ["gp", "nn"],
//!   "optimizers": ["mpa", "uks"]
//! }
//! ```
//!
//! Everything else has defaults: `mask_fraction` 0.3, `outer_iters` 5,
//! `densities` empty (the scenario's own roster size), `energy` empty
//! (paper weights), `out_dir` "out". Scenario entries are file paths,
//! resolved relative to the working directory. Unknown fields are rejected.

use crate::energy::{EnergyParams, PriorKind};
use crate::opt::alternate::OptimizerKind;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-field energy-weight overrides. Unset fields keep the paper defaults;
/// an unset `sigma_nn` additionally lets the evaluate command substitute the
/// residual spread recorded by NN training (setting it pins the value).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_kn: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_mv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_nn: Option<f64>,
}

impl EnergyOverrides {
    pub fn apply(&self, mut base: EnergyParams) -> EnergyParams {
        if let Some(v) = self.c_kn {
            base.c_kn = v;
        }
        if let Some(v) = self.c_mv {
            base.c_mv = v;
        }
        if let Some(v) = self.dt {
            base.dt = v;
        }
        if let Some(v) = self.rho {
            base.rho = v;
        }
        if let Some(v) = self.sigma_nn {
            base.sigma_nn = v;
        }
        base
    }
}

fn default_mask_fraction() -> f64 {
    0.3
}

fn default_outer_iters() -> usize {
    5
}

fn default_out_dir() -> String {
    "out".to_string()
}

/// The full experiment grid. Every command consumes the same document and
/// reads only the parts it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scenario file paths.
    pub scenarios: Vec<String>,
    /// One generated dataset and one evaluation run per seed.
    pub seeds: Vec<u64>,
    pub priors: Vec<PriorKind>,
    pub optimizers: Vec<OptimizerKind>,
    /// Fraction of frames hidden per agent before reconstruction.
    #[serde(default = "default_mask_fraction")]
    pub mask_fraction: f64,
    /// Outer alternation rounds per reconstruction.
    #[serde(default = "default_outer_iters")]
    pub outer_iters: usize,
    /// Agent counts for the density sweep; empty means each scenario's own
    /// roster size. Priors are trained at the first entry only.
    #[serde(default)]
    pub densities: Vec<usize>,
    #[serde(default)]
    pub energy: EnergyOverrides,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::parse(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serialization");
        text.push('\n');
        text
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Paper defaults with this config's overrides applied and validated.
    pub fn energy_params(&self) -> Result<EnergyParams> {
        let params = self.energy.apply(EnergyParams::default());
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() {
            return Err(Error::invalid("config: at least one scenario is required"));
        }
        if self.scenarios.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::invalid("config: empty scenario path"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("config: at least one seed is required"));
        }
        if has_duplicates(&self.seeds) {
            return Err(Error::invalid("config: duplicate seeds"));
        }
        if self.priors.is_empty() {
            return Err(Error::invalid("config: at least one prior is required"));
        }
        if has_duplicates(&self.priors) {
            return Err(Error::invalid("config: duplicate priors"));
        }
        if self.optimizers.is_empty() {
            return Err(Error::invalid("config: at least one optimizer is required"));
        }
        if has_duplicates(&self.optimizers) {
            return Err(Error::invalid("config: duplicate optimizers"));
        }
        if !(self.mask_fraction.is_finite()
            && self.mask_fraction > 0.0
            && self.mask_fraction < 1.0)
        {
            return Err(Error::invalid("config: mask_fraction must lie strictly in (0, 1)"));
        }
        if self.outer_iters == 0 {
            return Err(Error::invalid("config: outer_iters must be at least 1"));
        }
        if self.densities.iter().any(|&d| d == 0) {
            return Err(Error::invalid("config: densities must be at least 1"));
        }
        if has_duplicates(&self.densities) {
            return Err(Error::invalid("config: duplicate densities"));
        }
        if self.out_dir.trim().is_empty() {
            return Err(Error::invalid("config: out_dir must be non-empty"));
        }
        self.energy_params()?;
        Ok(())
    }
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items
        .iter()
        .enumerate()
        .any(|(i, a)| items[i + 1..].iter().any(|b| a == b))
}
