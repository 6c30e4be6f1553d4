//! Run configuration files.
//!
//! A run is described by one TOML file. Every section is optional:
//!
//! ```toml
//! seed = 7
//! out = "runs/s1"
//!
//! [data]
//! path = "basics.csv"        # omit to simulate a training set
//! individuals = 25
//! horizon = 25
//!
//! [sim]                      # generative model; needed by `evaluate`
//! tau = 0.4
//!
//! [features]
//! prune_threshold = 0.8
//!
//! [policy]
//! intercept = true
//! columns = ["s1", "s2", "s3"]
//!
//! [actor]
//! p0 = 0.05
//! delta = { rule = "normalized_value_scale", value = 0.1 }
//!
//! [rollout]
//! horizon = 10000
//! burn_in = 1000
//! ```

use std::path::{Path, PathBuf};

use batchac::actor::ActorConfig;
use batchac::error::{Error, Result};
use batchac::features::DEFAULT_PRUNE_THRESHOLD;
use batchac::policy::PolicyFeatureMap;
use batchac::simenv::{RolloutSpec, SimConfig};
use batchac::trajectory::{DataFormat, Dataset};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub format: Option<DataFormat>,
    /// Size of a simulated training set.
    pub individuals: usize,
    pub horizon: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            format: None,
            individuals: 25,
            horizon: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub prune_threshold: f64,
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection {
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub intercept: bool,
    /// State column names; the first three columns when absent.
    pub columns: Option<Vec<String>>,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            intercept: true,
            columns: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Where outputs go; not part of the hashed configuration.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub jobs: Option<usize>,
    pub data: DataSection,
    pub sim: Option<SimConfig>,
    pub features: FeatureSection,
    pub policy: PolicySection,
    pub actor: ActorConfig,
    pub rollout: RolloutSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// The simulator, if this run has one: either the `[sim]` section or,
    /// when no dataset is given, the default model.
    pub fn model(&self) -> Option<SimConfig> {
        match (&self.sim, &self.data.path) {
            (Some(s), _) => Some(s.clone()),
            (None, None) => Some(SimConfig::default()),
            (None, Some(_)) => None,
        }
    }

    pub fn data_format(&self, path: &Path) -> DataFormat {
        self.data.format.unwrap_or_else(|| DataFormat::from_path(path))
    }

    pub fn policy_map(&self, d: &Dataset) -> Result<PolicyFeatureMap> {
        let names = match &self.policy.columns {
            Some(c) => c.clone(),
            None => d.state_names.iter().take(3).cloned().collect(),
        };
        PolicyFeatureMap::from_column_names(d, self.policy.intercept, &names)
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
