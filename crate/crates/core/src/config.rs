//! Run configuration for the command-line front end.
//!
//! A TOML document; unknown keys anywhere are rejected. Example:
//!
//! ```toml
//! experiment = "compare"
//! output_dir = "out/compare"
//! seeds = [0, 1, 2, 3, 4]
//!
//! [tasks]
//! num_tasks = 4
//! d_in = 16
//! d_out = 16
//! conflict_angle = -0.3333333333333333
//! teacher_rank = 2
//! delta_norm = 4.0
//! input_shift = 3.0
//! noise_std = 0.1
//! seq_len = 8
//!
//! [train]
//! steps = 2000
//! lr = 0.01
//! batch_size = 8
//! epoch_steps = 100
//! eval_samples = 64
//!
//! [adapter]
//! num_factors = 8
//! rank = 2
//! routing = "instance"
//! gating = "soft"
//! cfs = true
//!
//! [interference]
//! group = "all_adapter"
//! lambda = 0.1
//! batches_per_task = 4
//! batch_size = 8
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::check::GradCheckSettings;
use crate::harness::train::VariantKind;
use crate::harness::{AdapterSpec, ExperimentConfig, InterferenceSettings, TaskSpec, TrainSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Compare,
    RoutingAblation,
    CfsAblation,
    RoutingSimilarity,
    Interference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Experiment run by `compare`.
    #[serde(default = "default_kind")]
    pub experiment: ExperimentKind,
    /// Variant trained by `train`.
    #[serde(default = "default_variant")]
    pub variant: VariantKind,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_routing_samples")]
    pub routing_samples: usize,
    pub tasks: TaskSpec,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub adapter: AdapterSpec,
    #[serde(default)]
    pub interference: InterferenceSettings,
    #[serde(default)]
    pub gradcheck: GradCheckSettings,
}

fn default_kind() -> ExperimentKind {
    ExperimentKind::Compare
}

fn default_variant() -> VariantKind {
    VariantKind::Mixlora
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_routing_samples() -> usize {
    250
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            tasks: self.tasks.clone(),
            train: self.train.clone(),
            adapter: self.adapter.clone(),
            seeds: self.seeds.clone(),
            routing_samples: self.routing_samples,
            interference: self.interference.clone(),
        }
    }

    /// Replaces the seed list with a single seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment().validate()?;
        self.gradcheck.validate()
    }
}
