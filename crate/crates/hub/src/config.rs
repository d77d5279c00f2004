//! Hub configuration file (TOML).
//!
//! ```toml
//! listen_tcp = "127.0.0.1:7700"
//! listen_ws = "127.0.0.1:7701"
//! store_root = "store"
//! detector_cmd = "mock-detector --seed 7"
//! trainer_cmd = "mock-trainer"
//! embedder_cmd = "mock-embedder"   # optional
//! cache_bound = 64
//! bins = 10
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use teachhub_core::DEFAULT_BINS;
use thiserror::Error;

pub const DEFAULT_CACHE_BOUND: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HubConfig {
    pub listen_tcp: String,
    pub listen_ws: String,
    pub store_root: PathBuf,
    pub detector_cmd: String,
    pub trainer_cmd: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder_cmd: Option<String>,
    #[serde(default = "default_cache_bound")]
    pub cache_bound: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Weights registered as `v0` when the store is created.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_weights: Option<PathBuf>,
}

fn default_cache_bound() -> usize {
    DEFAULT_CACHE_BOUND
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
}

impl HubConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let config: HubConfig = toml::from_str(text).map_err(|e| e.message().to_string())?;
        if config.cache_bound == 0 {
            return Err("`cache_bound` must be at least 1".into());
        }
        if config.bins == 0 {
            return Err("`bins` must be at least 1".into());
        }
        for (key, cmd) in [("detector_cmd", &config.detector_cmd), ("trainer_cmd", &config.trainer_cmd)] {
            if cmd.trim().is_empty() {
                return Err(format!("`{key}` is empty"));
            }
        }
        Ok(config)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let mut config =
            Self::parse(&text).map_err(|message| ConfigError::Invalid { path: path.into(), message })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.store_root.is_relative() {
            config.store_root = base.join(&config.store_root);
        }
        if let Some(w) = config.initial_weights.as_mut().filter(|w| w.is_relative()) {
            *w = base.join(&*w);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
listen_tcp = "127.0.0.1:0"
listen_ws = "127.0.0.1:0"
store_root = "store"
detector_cmd = "mock-detector"
trainer_cmd = "mock-trainer"
"#;

    #[test]
    fn defaults_apply() {
        let c = HubConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.cache_bound, 64);
        assert_eq!(c.bins, 10);
        assert_eq!(c.embedder_cmd, None);
        assert_eq!(HubConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = HubConfig::parse(&format!("{MINIMAL}cache_size = 3\n")).unwrap_err();
        assert!(err.contains("cache_size"), "{err}");
    }

    #[test]
    fn missing_key_is_named() {
        let err = HubConfig::parse(&MINIMAL.replace("trainer_cmd = \"mock-trainer\"", "")).unwrap_err();
        assert!(err.contains("trainer_cmd"), "{err}");
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hub.toml");
        fs::write(&path, MINIMAL).unwrap();
        let c = HubConfig::load(&path).unwrap();
        assert_eq!(c.store_root, dir.path().join("store"));
    }
}
