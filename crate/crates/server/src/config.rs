//! Service configuration, loadable from a TOML file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use ctlmap::active_learning::FeedbackConfig;
use ctlmap::classifier::TrainConfig;
use ctlmap::hybrid::DEFAULT_MAX_HITS;
use serde::{Deserialize, Serialize};

use crate::engine::{EngineError, Result};

pub const DATA_DIR_ENV: &str = "DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen_address: SocketAddr,
    pub data_dir: PathBuf,
    pub feedback: FeedbackConfig,
    pub default_threshold: f64,
    pub auth_token: Option<String>,
    pub max_hits: usize,
    pub train: TrainConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen_address: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: PathBuf::from("data"),
            feedback: FeedbackConfig::default(),
            default_threshold: 0.5,
            auth_token: None,
            max_hits: DEFAULT_MAX_HITS,
            train: TrainConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ServiceConfig = toml::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` if given, then applies the `DATA_DIR` override.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| EngineError::Config(format!("{}: {e}", p.display())))?;
                ServiceConfig::from_toml(&text)?
            }
            None => ServiceConfig::default(),
        };
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            config.data_dir = PathBuf::from(dir);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.default_threshold) {
            return Err(EngineError::Config("default_threshold must lie in [0, 1]".into()));
        }
        if self.feedback.y == 0 {
            return Err(EngineError::Config("feedback.y must be at least 1".into()));
        }
        if self.max_hits == 0 {
            return Err(EngineError::Config("max_hits must be at least 1".into()));
        }
        self.train
            .validate()
            .map_err(|e| EngineError::Config(e.to_string()))
    }
}
