//! The TOML run configuration. Every table is optional and every key has a
//! default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use idf_core::model::ModelConfig;
use idf_core::train::{PretrainConfig, TrainConfig};
use idf_core::transfer::TransferConfig;
use idf_core::{IdfError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Oriented cloud for `fit`.
    pub cloud: Option<PathBuf>,
    /// Clouds for `transfer`; the base clouds default to the detailed ones.
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub source_base: Option<PathBuf>,
    pub target_base: Option<PathBuf>,
    /// Directory receiving checkpoints, histories and the run manifest.
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            cloud: None,
            source: None,
            target: None,
            source_base: None,
            target_base: None,
            output: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seed of every stage.
    pub seed: Option<u64>,
    /// Forces a single worker thread.
    pub deterministic: bool,
    /// Regress the base onto a sphere before fitting.
    pub pretrain_base: bool,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub transfer: TransferConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| IdfError::Config(e.to_string()))
    }

    /// Reads a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IdfError::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| IdfError::format(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.paths;
        for slot in [&mut p.cloud, &mut p.source, &mut p.target, &mut p.source_base, &mut p.target_base] {
            if let Some(v) = slot.as_mut() {
                *v = dir.join(&*v);
            }
        }
        p.output = dir.join(&p.output);
        cfg.apply_seed();
        Ok(cfg)
    }

    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.pretrain.seed = s;
            self.transfer.seed = s;
            self.transfer.pretrain.seed = s;
            self.transfer.base_train.seed = s;
            self.transfer.transfer_train.seed = s;
        }
    }

    /// Seed for network initialization.
    pub fn init_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("epochz = 3").is_err());
        assert!(RunConfig::from_toml("[train]\nepochz = 3").is_err());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let mut cfg = RunConfig::from_toml("seed = 7\n[train]\nepochs = 2").unwrap();
        cfg.apply_seed();
        assert_eq!((cfg.train.seed, cfg.transfer.transfer_train.seed, cfg.init_seed()), (7, 7, 7));
        assert_eq!(cfg.train.epochs, 2);
    }
}
