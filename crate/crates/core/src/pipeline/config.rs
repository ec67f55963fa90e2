//! Pipeline configuration, read from TOML.
//!
//! ```toml
//! name = "desk"
//! seed = 1
//! runs_dir = "runs"
//!
//! [budgets]
//! s1_steps = 300000
//!
//! [policy]
//! workers = 8
//! [policy.sac]
//! hidden = [64, 64]
//!
//! [filter]
//! hidden = [64, 64]
//! ```
//!
//! Every section is optional and falls back to the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::gravity::GravitySchedule;
use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::filter::FilterTrainConfig;
use crate::policy::PolicyTrainConfig;
use crate::rewards::RewardConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub s1_steps: u64,
    pub s2_steps: u64,
    pub s5_steps: u64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            s1_steps: 300_000,
            s2_steps: 150_000,
            s5_steps: 150_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GravityConfig {
    pub initial: f64,
    pub increment: f64,
    pub threshold: f64,
    pub window: usize,
    pub deadline: f64,
}

impl Default for GravityConfig {
    fn default() -> Self {
        Self {
            initial: 0.0,
            increment: 0.1,
            threshold: 0.4,
            window: 100,
            deadline: 0.75,
        }
    }
}

impl GravityConfig {
    pub fn schedule(&self) -> Result<GravitySchedule> {
        GravitySchedule::new(self.initial, self.increment, self.threshold, self.window, self.deadline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Offline sequences collected with the true-state policy.
    pub offline_sequences: usize,
    pub validation_fraction: f64,
    /// Held-out sequences, also the fixed in-loop evaluation suite.
    pub test_fraction: f64,
    /// Parallel collection workers.
    pub workers: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            offline_sequences: 2_000,
            validation_fraction: 0.1,
            test_fraction: 0.1,
            workers: 8,
        }
    }
}

/// Success rates reported for the real system, kept as metadata only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceRates {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub s4: f64,
    pub s5: f64,
}

impl Default for ReferenceRates {
    fn default() -> Self {
        Self {
            s1: 0.68,
            s2: 0.99,
            s3: 0.74,
            s4: 0.76,
            s5: 0.92,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub name: String,
    pub seed: u64,
    pub runs_dir: PathBuf,
    pub budgets: Budgets,
    pub gravity: GravityConfig,
    pub policy: PolicyTrainConfig,
    pub rewards: RewardConfig,
    pub filter: FilterTrainConfig,
    pub dataset: DatasetConfig,
    /// Benchmark run after every stage.
    pub bench: BenchConfig,
    pub reference_rates: ReferenceRates,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            seed: 1,
            runs_dir: PathBuf::from("runs"),
            budgets: Budgets::default(),
            gravity: GravityConfig::default(),
            policy: PolicyTrainConfig::default(),
            rewards: RewardConfig::default(),
            filter: FilterTrainConfig::default(),
            dataset: DatasetConfig::default(),
            bench: BenchConfig {
                runs_per_cell: 2,
                ..BenchConfig::default()
            },
            reference_rates: ReferenceRates::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run name {:?}", self.name)));
        }
        self.policy.validate()?;
        self.bench.validate()?;
        self.filter.loss.validate()?;
        self.gravity.schedule()?;
        let d = &self.dataset;
        if d.offline_sequences < 10 || d.workers == 0 {
            return Err(Error::Config(
                "dataset needs at least 10 sequences and one worker".into(),
            ));
        }
        if !(d.validation_fraction > 0.0 && d.test_fraction > 0.0 && d.validation_fraction + d.test_fraction < 1.0) {
            return Err(Error::Config(
                "validation and test fractions must be positive and sum below 1".into(),
            ));
        }
        Ok(())
    }

    /// `runs/<name>`.
    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.name)
    }
}
