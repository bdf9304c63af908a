//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::CheckpointSpec;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Inverted k-fold protocol over the target file.
    #[default]
    CrossValidate,
    /// One fit on the whole target file, optionally scored on `test`.
    Fit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// `hashed:<dim>[:<seed>]` or a precomputed embedding file.
    pub embeddings: String,
    pub out: PathBuf,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Early-detection grid evaluated on the test events after training.
    #[serde(default)]
    pub checkpoints: Option<CheckpointSpec>,
    /// Extra α values; each gets its own sub-directory.
    #[serde(default)]
    pub alpha_sweep: Vec<f64>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_folds() -> usize {
    5
}

impl RunConfig {
    /// Reads, parses and validates a config file. Relative paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.source, &mut cfg.target, &mut cfg.out] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(t) = cfg.test.as_mut().filter(|t| t.is_relative()) {
            *t = base.join(&*t);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.mode == RunMode::CrossValidate && self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".into()));
        }
        if let Some(cp) = &self.checkpoints {
            CheckpointSpec::new(cp.mode, cp.values.clone())?;
        }
        if self.alpha_sweep.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("alpha_sweep values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}
