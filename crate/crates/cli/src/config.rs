//! JSON experiment file. Every section is optional; flags override fields.

use std::path::{Path, PathBuf};

use damage_seq::audit::{AuditConfig, MatrixConfig};
use damage_seq::dataset::{
    load_csv_with, split, synthesize, DatasetSplit, LoadOptions, PathDataset, SynthesisRanges, DEFAULT_SPLIT_SEED,
    DEFAULT_TRAIN_FRACTION,
};
use damage_seq::deformation::DEFAULT_DT;
use damage_seq::hpo::StudySettings;
use damage_seq::models::ModelConfig;
use damage_seq::training::TrainConfig;
use damage_seq::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: Option<PathBuf>,
    pub dataset: Option<DatasetSection>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub search: Option<StudySettings>,
    pub audit: Option<AuditConfig>,
    pub matrix: Option<MatrixConfig>,
}

impl ExperimentConfig {
    pub fn load(file: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(file).map_err(|e| Error::Io {
            path: file.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", file.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    File,
    Synthetic,
}

/// Where paths come from, plus the train/test split applied to them.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: Source,
    /// CSV file, for `source: file`.
    pub path: Option<PathBuf>,
    pub dt: Option<f64>,
    /// Corpus size and generator seed, for `source: synthetic`.
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub ranges: Option<SynthesisRanges>,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
}

fn default_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}

fn default_split_seed() -> u64 {
    DEFAULT_SPLIT_SEED
}

impl DatasetSection {
    pub fn from_file(path: PathBuf) -> Self {
        Self {
            source: Source::File,
            path: Some(path),
            dt: None,
            paths: None,
            steps: None,
            seed: None,
            ranges: None,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            split_seed: DEFAULT_SPLIT_SEED,
        }
    }

    pub fn load(&self) -> Result<PathDataset> {
        match self.source {
            Source::File => {
                if self.paths.is_some() || self.steps.is_some() || self.seed.is_some() || self.ranges.is_some() {
                    return Err(Error::invalid("file dataset takes no synthetic sizes, seed or ranges"));
                }
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::invalid("file dataset needs `path`"))?;
                if !path.exists() {
                    return Err(Error::invalid(format!("dataset file {} does not exist", path.display())));
                }
                let options = LoadOptions {
                    dt: self.dt.unwrap_or(DEFAULT_DT),
                    ..LoadOptions::default()
                };
                load_csv_with(path, &options)
            }
            Source::Synthetic => {
                if self.path.is_some() {
                    return Err(Error::invalid("synthetic dataset takes no `path`"));
                }
                let n = self.paths.ok_or_else(|| Error::invalid("synthetic dataset needs `paths`"))?;
                let steps = self.steps.ok_or_else(|| Error::invalid("synthetic dataset needs `steps`"))?;
                synthesize(n, steps, self.seed.unwrap_or(0), &self.ranges.clone().unwrap_or_default())
            }
        }
    }

    pub fn load_split(&self) -> Result<(PathDataset, DatasetSplit)> {
        let ds = self.load()?;
        let parts = split(&ds, self.train_fraction, self.split_seed)?;
        Ok((ds, parts))
    }
}
