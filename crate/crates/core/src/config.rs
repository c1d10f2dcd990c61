//! Experiment configuration files (TOML).
//!
//! ```toml
//! schema_version = 1
//! run_id = "specialist-0"
//! output_dir = "runs"
//! dataset = "runs/data/dataset.umds"
//! ks = [1, 2, 4]
//!
//! [data]
//! seed = 0
//! input_dim = 32
//! out_of_domain = false
//!
//! [train]
//! iterations = 2000
//! checkpoint_every = 100
//! lr = 0.001
//! ```
//!
//! Every key is optional; missing keys take the values of
//! [`ExperimentConfig::default`]. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{default_sources, generate_synthetic, out_of_domain_source, Dataset, SourceSpec, SplitRatios};
use crate::evaluation::DEFAULT_KS;
use crate::numerics::RngSeed;
use crate::training::TrainConfig;
use crate::{Error, Result, SourceId};

pub const SCHEMA_VERSION: u32 = 1;

/// Source id given to the out-of-domain source when it is enabled.
pub const OUT_OF_DOMAIN_ID: SourceId = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub input_dim: usize,
    /// Source specs; empty means the default three-source benchmark.
    pub sources: Vec<SourceSpec>,
    /// Append the large out-of-domain source.
    pub out_of_domain: bool,
    pub split: SplitRatios,
    /// Seed of the split; derived from `seed` when absent.
    pub split_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            input_dim: 32,
            sources: Vec::new(),
            out_of_domain: false,
            split: SplitRatios::default(),
            split_seed: None,
        }
    }
}

impl DataConfig {
    pub fn specs(&self) -> Vec<SourceSpec> {
        let mut specs = if self.sources.is_empty() {
            default_sources()
        } else {
            self.sources.clone()
        };
        if self.out_of_domain {
            specs.push(out_of_domain_source(OUT_OF_DOMAIN_ID));
        }
        specs
    }

    /// Generates and splits the configured dataset.
    pub fn build(&self) -> Result<Dataset> {
        let seed = RngSeed(self.seed);
        let split_seed = self.split_seed.map_or(seed.derive(u64::MAX), RngSeed);
        generate_synthetic(&self.specs(), self.input_dim, seed)?.split(self.split, split_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub run_id: Option<String>,
    /// Root under which each run writes `{run_id}/...`.
    pub output_dir: Option<PathBuf>,
    /// Dataset file used by training and evaluation commands.
    pub dataset: Option<PathBuf>,
    pub ks: Vec<usize>,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            run_id: None,
            output_dir: None,
            dataset: None,
            ks: DEFAULT_KS.to_vec(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let Some(id) = &self.run_id {
            validate_run_id(id)?;
        }
        if self.ks.is_empty() || self.ks.contains(&0) || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("ks must be increasing positive cutoffs, got {:?}", self.ks)));
        }
        self.train.validate()
    }
}

/// A run id names a single directory below the output root.
pub fn validate_run_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("run_id '{id}' must be a nonempty name of [A-Za-z0-9._-]")))
    }
}
