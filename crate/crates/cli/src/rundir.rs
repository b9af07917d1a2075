use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use glimpse_core::experiment::ExperimentConfig;
use glimpse_core::io::{read_json, write_json};

use crate::errors::{config_error, DependencyError, UsageError};
use crate::stages::Stage;

/// Which stages have completed in a run directory, under which config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub config_hash: String,
    pub seed: u64,
    pub completed: Vec<Stage>,
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Path of a declared input; a missing file is a dependency error.
    pub fn input(&self, rel: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(DependencyError(p).into())
        }
    }

    /// Path of an output, creating its parent directory.
    pub fn output(&self, rel: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    pub fn log(&self) -> anyhow::Result<Option<StageLog>> {
        let p = self.path("stages.json");
        if !p.is_file() {
            return Ok(None);
        }
        Ok(Some(read_json(&p)?))
    }

    pub fn write_log(&self, log: &StageLog) -> anyhow::Result<()> {
        write_json(&self.output("stages.json")?, log)?;
        Ok(())
    }
}

pub fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(UsageError(format!("config file {} not found", path.display())).into());
    }
    ExperimentConfig::load(path).map_err(config_error)
}
