//! Run configuration: one seed, one output directory and per-stage sections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::SweepConfig;
use crate::phantom::PhantomConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub phantom: PhantomConfig,
}

fn default_count() -> usize {
    20
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            count: default_count(),
            phantom: PhantomConfig::default(),
        }
    }
}

/// Top-level configuration shared by every subcommand. Seeds and paths live here only;
/// sections hold hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset manifest; `<out_dir>/data/manifest.json` when absent.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))
    }

    /// Parses and validates a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.manifest = cfg.manifest.map(|m| base.join(m));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::invalid("config.out_dir", "must not be empty"));
        }
        if self.dataset.count < 2 {
            return Err(Error::invalid("config.dataset.count", "must be >= 2"));
        }
        if self.dataset.phantom.seed != 0 {
            return Err(Error::invalid("config.dataset.phantom.seed", "seeds are set once, at the top level"));
        }
        self.dataset.phantom.validate()?;
        if self.sweep.seed != 0 {
            return Err(Error::invalid("config.sweep.seed", "seeds are set once, at the top level"));
        }
        self.sweep.validate()?;
        if let Some(t) = &self.train {
            if t.seed != 0 {
                return Err(Error::invalid("config.train.seed", "seeds are set once, at the top level"));
            }
            if !t.manifest.as_os_str().is_empty() || !t.out_dir.as_os_str().is_empty() {
                return Err(Error::invalid("config.train", "paths are set at the top level"));
            }
            self.train_config()?.validate()?;
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.data_dir().join("manifest.json"))
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            seed: self.seed,
            ..self.dataset.phantom.clone()
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = self
            .train
            .as_ref()
            .ok_or_else(|| Error::invalid("config.train", "section required for training"))?;
        Ok(TrainConfig {
            manifest: self.manifest_path(),
            out_dir: self.out_dir.clone(),
            seed: self.seed,
            ..t.clone()
        })
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            seed: self.seed,
            ..self.sweep.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 3, "out_dir": "runs/a"}"#).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.dataset.count, 20);
        assert_eq!(cfg.phantom_config().seed, 3);
        assert_eq!(cfg.manifest_path(), PathBuf::from("runs/a/data/manifest.json"));
        assert!(cfg.train_config().is_err());
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = r#"{"seed": 1, "out_dir": "o", "train": {"iterations": 2, "afa": {"epzilon": 0.1}}}"#;
        let err = RunConfig::from_json(text).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("epzilon"), "{err}");
    }

    #[test]
    fn section_seeds_are_rejected() {
        let text = r#"{"seed": 1, "out_dir": "o", "train": {"iterations": 2, "seed": 5}}"#;
        assert!(RunConfig::from_json(text).unwrap().validate().is_err());
    }

    #[test]
    fn paths_resolve_against_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 1, "out_dir": "out", "manifest": "d/m.json", "train": {"iterations": 3}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!(t.out_dir, dir.path().join("out"));
        assert_eq!(t.manifest, dir.path().join("d/m.json"));
        assert_eq!(t.seed, 1);
    }
}
