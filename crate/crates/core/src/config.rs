//! Run configuration read from TOML.
//!
//! ```toml
//! policy_mode = "full_pooling"
//! reps = 200
//!
//! [trial]
//! num_participants = 12
//! days_per_participant = 28
//! ```
//!
//! Every section and key is optional; omitted values take the deployed
//! defaults. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bandit::{PolicyMode, Prior, SmoothingConfig};
use crate::environment::SyntheticOptions;
use crate::trial::TrialConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub policy_mode: PolicyMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault_plan: Option<PathBuf>,
    pub reps: usize,
    pub output_dir: PathBuf,
    pub trial: TrialConfig,
    pub prior: Prior,
    pub smoothing: SmoothingConfig,
    pub synthetic: SyntheticOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            policy_mode: PolicyMode::FullPooling,
            fault_plan: None,
            reps: 500,
            output_dir: PathBuf::from("out"),
            trial: TrialConfig::default(),
            prior: Prior::default(),
            smoothing: SmoothingConfig::default(),
            synthetic: SyntheticOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.trial.validate()?;
        self.prior.validate()?;
        self.smoothing.validate()?;
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
