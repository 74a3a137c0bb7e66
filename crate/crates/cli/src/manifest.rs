use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use percept_core::trainer::{CHECKPOINT_DIR, METRICS_FILE};
use percept_core::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
}

/// Written once before the first training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    /// Paths relative to the run directory.
    pub artifacts: Artifacts,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            artifacts: Artifacts {
                config: CONFIG_FILE.into(),
                metrics: METRICS_FILE.into(),
                checkpoints: CHECKPOINT_DIR.into(),
            },
            config: config.clone(),
        }
    }

    /// Writes `manifest.json` and `config.toml` into `dir`, refusing to
    /// replace an existing manifest.
    pub fn create(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            anyhow::bail!("{} already exists; pick a fresh --out directory", path.display());
        }
        fs::write(dir.join(CONFIG_FILE), self.config.to_toml_string()?)?;
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("no run manifest at {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
