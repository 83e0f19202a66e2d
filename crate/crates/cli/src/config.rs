//! The single run configuration document shared by every subcommand.

use std::path::{Path, PathBuf};

use netop_core::trainer::TrainError;
use netop_core::{SimConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{Failure, EXIT_CONFIG};

pub const CONFIG_SCHEMA: &str = "netop-config-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub networks: usize,
    pub seed: u64,
    /// Worker threads; `None` uses every available core.
    pub workers: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { networks: 200, seed: 1000, workers: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub count: usize,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { count: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub checkpoint: PathBuf,
    /// Metrics log; defaults to the checkpoint path with `.metrics.jsonl`.
    pub metrics: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { checkpoint: "netop.ckpt".into(), metrics: None, output_dir: "networks".into() }
    }
}

// Alphabetical field order keeps emitted keys sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub evaluation: EvalSettings,
    pub oracle_check: OracleSettings,
    pub paths: Paths,
    pub schema: String,
    pub sim: SimConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            evaluation: EvalSettings::default(),
            oracle_check: OracleSettings::default(),
            paths: Paths::default(),
            schema: CONFIG_SCHEMA.to_string(),
            sim: SimConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reduced pools (4-6 devices, 8 subnets, 8 addresses) with a matching
    /// training schedule.
    pub fn desk() -> Self {
        Self { sim: SimConfig::desk(), train: TrainConfig::desk(), ..Self::default() }
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Failure::new(EXIT_CONFIG, anyhow::anyhow!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Failure::new(EXIT_CONFIG, anyhow::anyhow!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Loads `path`, or the defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, Failure> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let bad = |field: &str, reason: String| {
            Failure::new(EXIT_CONFIG, anyhow::anyhow!("invalid config field `{field}`: {reason}"))
        };
        if self.schema != CONFIG_SCHEMA {
            return Err(bad("schema", format!("expected `{CONFIG_SCHEMA}`, got `{}`", self.schema)));
        }
        if let Err(netop_core::netsim::SimError::Config { field, reason }) = self.sim.validate() {
            return Err(bad(&format!("sim.{field}"), reason));
        }
        match self.train.validate() {
            Err(TrainError::Config { field, reason }) => {
                return Err(bad(&format!("train.{field}"), reason))
            }
            Err(e) => return Err(bad("train", e.to_string())),
            Ok(()) => {}
        }
        if self.evaluation.workers == Some(0) {
            return Err(bad("evaluation.workers", "must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }
}
