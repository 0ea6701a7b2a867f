//! Run configuration: one JSON document covering data generation, training,
//! file locations and the ablation grid.

use std::path::{Path, PathBuf};

use pid_lrsc::model::TrainConfig;
use pid_lrsc::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    /// Bags written by `gen`.
    pub count: usize,
    /// Share of bags used for training; the rest is the test split.
    pub train_fraction: f64,
    pub ablation_seeds: Vec<u64>,
    pub gradcheck: GradcheckConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            count: 300,
            train_fraction: 0.7,
            ablation_seeds: vec![0, 1, 2, 3, 4],
            gradcheck: GradcheckConfig::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            coordinates: 60,
            step: 1e-6,
            tolerance: 1e-5,
        }
    }
}

/// Locations; relative defaults live under the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub output: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub prototypes: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Paths after applying defaults and command-line overrides.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub output: PathBuf,
    pub dataset: PathBuf,
    pub prototypes: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            CliError::Config {
                key: if key == "." { "<root>".into() } else { key },
                message: e.into_inner().to_string(),
            }
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let prefixed = |section: &str, e: pid_lrsc::Error| match e {
            pid_lrsc::Error::Config { key, message } => CliError::Config {
                key: format!("{section}.{key}"),
                message,
            },
            other => CliError::Lib(other),
        };
        self.synth.validate().map_err(|e| prefixed("synth", e))?;
        self.train.validate().map_err(|e| prefixed("train", e))?;
        if self.train.classes != self.synth.classes {
            return Err(CliError::config("train.classes", "must equal synth.classes"));
        }
        if self.count == 0 {
            return Err(CliError::config("count", "must be ≥ 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(CliError::config("train_fraction", "must lie in (0, 1]"));
        }
        if self.ablation_seeds.is_empty() {
            return Err(CliError::config("ablation_seeds", "must list at least one seed"));
        }
        if self.gradcheck.coordinates < 50 {
            return Err(CliError::config("gradcheck.coordinates", "must be ≥ 50"));
        }
        if !(self.gradcheck.step > 0.0) {
            return Err(CliError::config("gradcheck.step", "must be > 0"));
        }
        if !(self.gradcheck.tolerance > 0.0) {
            return Err(CliError::config("gradcheck.tolerance", "must be > 0"));
        }
        Ok(())
    }

    /// Applies `--seed` to both the generator and the trainer.
    pub fn override_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    pub fn resolve(&self, out: Option<&Path>) -> Resolved {
        let output = out
            .map(Path::to_path_buf)
            .or_else(|| self.paths.output.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        let dataset = self.paths.dataset.clone().unwrap_or_else(|| output.join("dataset"));
        let prototypes = self
            .paths
            .prototypes
            .clone()
            .unwrap_or_else(|| dataset.join(pid_lrsc::io::PROTOTYPES_FILE));
        let checkpoint = self.paths.checkpoint.clone().unwrap_or_else(|| output.join("model.pidm"));
        Resolved {
            output,
            dataset,
            prototypes,
            checkpoint,
        }
    }
}
