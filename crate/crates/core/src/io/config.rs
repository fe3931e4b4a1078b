//! TOML configuration. Every table is optional and every key has a default;
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::read_bytes;
use crate::dbscan::DbscanParams;
use crate::error::{Error, Result};
use crate::losses::{ChamferConfig, MultiBodyConfig};
use crate::optim::{AdamConfig, NetworkConfig, SolveConfig};
use crate::trajectory::TrajectoryConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub patience: usize,
    pub omega: f64,
    pub enable_rigidity: bool,
    pub seed: u64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolveConfig::default();
        Self {
            learning_rate: s.learning_rate,
            max_iters: s.max_iters,
            patience: s.patience,
            omega: s.omega,
            enable_rigidity: s.enable_rigidity,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub solver: SolverSection,
    pub network: NetworkConfig,
    pub adam: AdamConfig,
    pub chamfer: ChamferConfig,
    pub multibody: MultiBodyConfig,
    pub dbscan: DbscanParams,
    pub trajectory: TrajectoryConfig,
}

impl Config {
    pub fn solve(&self) -> SolveConfig {
        let s = &self.solver;
        SolveConfig {
            learning_rate: s.learning_rate,
            max_iters: s.max_iters,
            patience: s.patience,
            omega: s.omega,
            enable_rigidity: s.enable_rigidity,
            seed: s.seed,
            adam: self.adam,
            network: self.network,
            chamfer: self.chamfer,
            multibody: self.multibody,
            dbscan: self.dbscan,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.solve().validate()?;
        self.trajectory.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<Config> {
    let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(path, "config is not UTF-8"))?;
    parse_config(text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
