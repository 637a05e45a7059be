use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svaclr_core::eval::ProbeConfig;
use svaclr_core::{DatasetSpec, TrainConfig};

use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.json";

/// Everything a run depends on. Missing keys take their defaults; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub output_dir: Option<PathBuf>,
    /// Drives training, view sampling and probes. `dataset.seed` drives
    /// generation.
    pub seed: u64,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// `explicit` if given, else `config.json` next to the input data, else
    /// defaults.
    pub fn locate(explicit: Option<&Path>, data_dir: Option<&Path>) -> Result<Self, CliError> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        if let Some(d) = data_dir {
            let p = d.join(CONFIG_FILE);
            if p.is_file() {
                return Self::load(&p);
            }
        }
        Ok(RunConfig::default())
    }

    /// Fold the top-level seed into the training config and validate.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        if self.train.seed != 0 && self.train.seed != self.seed {
            return Err(CliError::Config(format!(
                "train.seed ({}) conflicts with seed ({}); set only the top-level seed",
                self.train.seed, self.seed
            )));
        }
        self.train.seed = self.seed;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        crate::write_file(&dir.join(CONFIG_FILE), self.to_json().as_bytes())
    }
}
