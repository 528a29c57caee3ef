//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//!
//! [stream]
//! n_domains = 4
//! dim = 32
//! domain_separation = 3.0
//!
//! [em]
//! n_restarts = 3
//!
//! [train]
//! epochs = 100
//! learning_rate = 0.01
//!
//! [harness]
//! gmm_components = 2
//! kmeans_centers = 5
//! backbone_params = 86000000.0
//! ```
//!
//! Every section and key is optional. The single top-level `seed` drives all
//! random streams. [`Config::hash`] fingerprints the fully resolved
//! configuration and is recorded in every output.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gmc::EmConfig;
use crate::harness::{HarnessConfig, StreamConfig};
use crate::mdfn::TrainConfig;
use crate::rng::RngStream;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub stream: StreamConfig,
    pub em: EmConfig,
    pub train: TrainConfig,
    pub harness: HarnessConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.harness_config().validate()
    }

    /// Canonical serialization: every key, defaults filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Hex SHA-256 of [`Config::to_toml`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig { seed: self.seed, ..self.stream.clone() }
    }

    pub fn harness_config(&self) -> HarnessConfig {
        HarnessConfig { seed: self.seed, em: self.em.clone(), train: self.train.clone(), ..self.harness.clone() }
    }

    /// EM settings seeded for a standalone fit.
    pub fn em_config(&self) -> EmConfig {
        self.em.clone().with_seed(RngStream::new(self.seed, 0))
    }
}
