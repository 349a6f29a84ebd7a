//! Prefix-consistency audit: does cutting the end off a strain history
//! change what the model predicted for the steps that remain?

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{split, PathDataset, DEFAULT_TRAIN_FRACTION};
use crate::deformation::{localization_step, LoadingPath};
use crate::error::{Error, Result};
use crate::models::{
    read_json, write_json, ArchitectureTag, DecoderInit, MaskMode, ModelConfig, Padding, PositionalEncoding,
    SequenceModel,
};
use crate::training::{train, TrainConfig};

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 0.9];
pub const DEFAULT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_THRESHOLD: f64 = 1.0;
pub const DEFAULT_AUDIT_PATHS: usize = 100;
pub const AUDIT_FORMAT: &str = "damage-seq/audit/v1";
pub const AUDIT_CSV_COLUMNS: [&str; 6] = ["path_id", "fraction", "max_dev", "mean_dev", "loc_full", "loc_trunc"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditPaths {
    /// The first `n` paths in id order.
    Count(usize),
    Ids(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub fractions: Vec<f64>,
    pub tolerance: f64,
    pub threshold: f64,
    pub paths: AuditPaths,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            fractions: DEFAULT_FRACTIONS.to_vec(),
            tolerance: DEFAULT_TOLERANCE,
            threshold: DEFAULT_THRESHOLD,
            paths: AuditPaths::Count(DEFAULT_AUDIT_PATHS),
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(Error::invalid("at least one truncation fraction is required"));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return Err(Error::invalid(format!("truncation fraction {f} outside (0, 1)")));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("deviation tolerance must be positive"));
        }
        if !self.threshold.is_finite() {
            return Err(Error::invalid("localization threshold must be finite"));
        }
        Ok(())
    }

    fn select<'a>(&self, dataset: &'a PathDataset) -> Result<Vec<&'a LoadingPath>> {
        let chosen: Vec<&LoadingPath> = match &self.paths {
            AuditPaths::Count(n) => {
                let mut all: Vec<&LoadingPath> = dataset.paths.iter().collect();
                all.sort_by_key(|p| p.path_id);
                all.truncate(*n);
                all
            }
            AuditPaths::Ids(ids) => {
                let mut ids = ids.clone();
                ids.sort_unstable();
                ids.dedup();
                ids.iter()
                    .map(|&id| {
                        dataset
                            .get(id)
                            .ok_or_else(|| Error::invalid(format!("path {id} is not in the dataset")))
                    })
                    .collect::<Result<_>>()?
            }
        };
        if chosen.is_empty() {
            return Err(Error::invalid("audit set is empty"));
        }
        Ok(chosen)
    }
}

/// Steps kept by [`truncate_path`]: `ceil(fraction * n)`, ignoring float
/// noise below 1e-9 of a step.
pub fn truncated_len(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// The first `ceil(fraction * n)` steps of `path`.
pub fn truncate_path(path: &LoadingPath, fraction: f64) -> Result<LoadingPath> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("truncation fraction {fraction} outside (0, 1)")));
    }
    let len = truncated_len(path.len(), fraction);
    if len == 0 {
        return Err(Error::invalid(format!(
            "fraction {fraction} of {} steps leaves nothing",
            path.len()
        )));
    }
    path.prefix(len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Consistent,
    Inconsistent,
}

/// Deviation between full and truncated predictions over the kept steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRow {
    pub path_id: u64,
    pub fraction: f64,
    pub max_dev: f64,
    pub mean_dev: f64,
    /// Localization step of the full-history prediction, restricted to the
    /// kept steps.
    pub loc_full: Option<usize>,
    pub loc_trunc: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditReport {
    pub format: String,
    pub architecture: ArchitectureTag,
    pub model: String,
    pub tolerance: f64,
    pub threshold: f64,
    pub fractions: Vec<f64>,
    pub rows: Vec<AuditRow>,
    pub n_paths: usize,
    /// Share of audited paths whose every fraction stays within tolerance.
    pub consistent_path_fraction: f64,
    pub max_deviation: f64,
    pub verdict: Verdict,
}

impl AuditReport {
    /// Share of audited paths whose largest deviation exceeds `level`.
    pub fn path_fraction_above(&self, level: f64) -> f64 {
        let mut worst: std::collections::BTreeMap<u64, f64> = Default::default();
        for r in &self.rows {
            let w = worst.entry(r.path_id).or_insert(0.0);
            *w = w.max(r.max_dev);
        }
        worst.values().filter(|&&d| d > level).count() as f64 / worst.len().max(1) as f64
    }

    /// Audited pairs whose localization step moved under truncation.
    pub fn localization_shifts(&self) -> usize {
        self.rows.iter().filter(|r| r.loc_full != r.loc_trunc).count()
    }

    pub fn save(&self, file: impl AsRef<Path>) -> Result<()> {
        write_json(file, self)
    }

    pub fn load(file: impl AsRef<Path>) -> Result<Self> {
        let r: AuditReport = read_json(file)?;
        if r.format != AUDIT_FORMAT {
            return Err(Error::invalid(format!("unknown audit format `{}`", r.format)));
        }
        Ok(r)
    }

    pub fn save_csv(&self, file: impl AsRef<Path>) -> Result<()> {
        let file = file.as_ref();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(file)
            .map_err(|e| Error::invalid(format!("{}: {e}", file.display())))?;
        w.write_record(AUDIT_CSV_COLUMNS)?;
        let loc = |l: Option<usize>| l.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.path_id.to_string(),
                r.fraction.to_string(),
                r.max_dev.to_string(),
                r.mean_dev.to_string(),
                loc(r.loc_full),
                loc(r.loc_trunc),
            ])?;
        }
        w.flush().map_err(|e| Error::io(file, e))
    }
}

/// Reads the rows written by [`AuditReport::save_csv`].
pub fn load_audit_csv(file: impl AsRef<Path>) -> Result<Vec<AuditRow>> {
    let file = file.as_ref();
    let mut rd = csv::Reader::from_path(file).map_err(|e| Error::invalid(format!("{}: {e}", file.display())))?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    if header != AUDIT_CSV_COLUMNS {
        return Err(Error::Schema {
            row: 0,
            column: header.join(","),
            message: "unexpected audit columns".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let cell = |k: usize| -> Result<&str> { Ok(rec.get(k).unwrap_or("")) };
        let bad = |k: usize, e: String| Error::Schema {
            row,
            column: AUDIT_CSV_COLUMNS[k].into(),
            message: e,
        };
        let num = |k: usize| -> Result<f64> { cell(k)?.parse::<f64>().map_err(|e| bad(k, e.to_string())) };
        let loc = |k: usize| -> Result<Option<usize>> {
            match cell(k)? {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|e: std::num::ParseIntError| bad(k, e.to_string())),
            }
        };
        rows.push(AuditRow {
            path_id: cell(0)?.parse().map_err(|e: std::num::ParseIntError| bad(0, e.to_string()))?,
            fraction: num(1)?,
            max_dev: num(2)?,
            mean_dev: num(3)?,
            loc_full: loc(4)?,
            loc_trunc: loc(5)?,
        });
    }
    Ok(rows)
}

/// Compares predictions on truncated histories with the matching prefix of
/// full-history predictions, for every selected path and fraction.
pub fn prefix_consistency_audit(model: &SequenceModel, dataset: &PathDataset, config: &AuditConfig) -> Result<AuditReport> {
    config.validate()?;
    let paths = config.select(dataset)?;
    let mut fractions = config.fractions.clone();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();

    let mut rows = Vec::with_capacity(paths.len() * fractions.len());
    let mut consistent_paths = 0usize;
    for path in &paths {
        let full = model.predict(path)?;
        let mut path_ok = true;
        for &f in &fractions {
            let cut = truncate_path(path, f)?;
            let part = model.predict(&cut)?;
            let overlap = &full[..part.len()];
            let devs: Vec<f64> = overlap.iter().zip(&part).map(|(a, b)| (a - b).abs()).collect();
            let max_dev = devs.iter().copied().fold(0.0, f64::max);
            let mean_dev = devs.iter().sum::<f64>() / devs.len() as f64;
            if !(max_dev <= config.tolerance) {
                path_ok = false;
            }
            rows.push(AuditRow {
                path_id: path.path_id,
                fraction: f,
                max_dev,
                mean_dev,
                loc_full: localization_step(overlap, config.threshold),
                loc_trunc: localization_step(&part, config.threshold),
            });
        }
        consistent_paths += path_ok as usize;
    }
    let max_deviation = rows.iter().map(|r| r.max_dev).fold(0.0, f64::max);
    let verdict = if consistent_paths == paths.len() {
        Verdict::Consistent
    } else {
        Verdict::Inconsistent
    };
    Ok(AuditReport {
        format: AUDIT_FORMAT.into(),
        architecture: model.tag(),
        model: model.config().label(),
        tolerance: config.tolerance,
        threshold: config.threshold,
        fractions,
        n_paths: paths.len(),
        consistent_path_fraction: consistent_paths as f64 / paths.len() as f64,
        max_deviation,
        verdict,
        rows,
    })
}

/// Fixed small configurations for the comparison across causal modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixConfig {
    pub audit: AuditConfig,
    pub train: TrainConfig,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub model_seed: u64,
    pub hidden: usize,
    pub filters: usize,
    pub kernel: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            audit: AuditConfig::default(),
            train: TrainConfig {
                max_epochs: 5,
                ..TrainConfig::default()
            },
            train_fraction: DEFAULT_TRAIN_FRACTION,
            split_seed: 42,
            model_seed: 0,
            hidden: 16,
            filters: 16,
            kernel: 3,
            d_model: 16,
            heads: 2,
            d_ff: 32,
        }
    }
}

impl MatrixConfig {
    /// Every architecture/mode combination, in table order.
    pub fn variants(&self) -> Vec<ModelConfig> {
        let transformer = |mask| ModelConfig::Transformer {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            dropout: crate::models::DEFAULT_TRANSFORMER_DROPOUT,
            mask,
            positional: PositionalEncoding::None,
        };
        let conv = |padding| ModelConfig::Conv1d {
            filters: self.filters,
            kernel: self.kernel,
            padding,
        };
        vec![
            ModelConfig::EncoderDecoderGru {
                hidden: self.hidden,
                decoder_init: DecoderInit::Encoder,
            },
            ModelConfig::EncoderDecoderGru {
                hidden: self.hidden,
                decoder_init: DecoderInit::Zero,
            },
            conv(Padding::Causal),
            conv(Padding::Symmetric),
            transformer(MaskMode::Causal),
            transformer(MaskMode::None),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixRow {
    pub model: String,
    pub architecture: ArchitectureTag,
    pub structurally_causal: bool,
    pub test_mse: Option<f64>,
    pub verdict: Option<Verdict>,
    pub max_deviation: Option<f64>,
    pub consistent_path_fraction: Option<f64>,
    pub localization_shifts: Option<usize>,
    /// Why the cell has no verdict, if training or auditing failed.
    pub error: Option<String>,
}

/// Trains each architecture/mode briefly and audits it. A failure in one
/// cell is recorded in that row and does not stop the others.
pub fn architecture_causality_matrix(dataset: &PathDataset, config: &MatrixConfig) -> Result<Vec<MatrixRow>> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    config.audit.validate()?;
    let parts = split(dataset, config.train_fraction, config.split_seed)?;
    let mut rows = Vec::new();
    for variant in config.variants() {
        let mut row = MatrixRow {
            model: variant.label(),
            architecture: variant.tag(),
            structurally_causal: variant.is_structurally_causal(),
            test_mse: None,
            verdict: None,
            max_deviation: None,
            consistent_path_fraction: None,
            localization_shifts: None,
            error: None,
        };
        let outcome = SequenceModel::new(variant, config.model_seed)
            .and_then(|m| train(&m, &parts, &config.train))
            .and_then(|(m, h)| Ok((prefix_consistency_audit(&m, dataset, &config.audit)?, h)));
        match outcome {
            Ok((report, history)) => {
                row.test_mse = Some(history.best_val_mse());
                row.verdict = Some(report.verdict);
                row.max_deviation = Some(report.max_deviation);
                row.consistent_path_fraction = Some(report.consistent_path_fraction);
                row.localization_shifts = Some(report.localization_shifts());
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn save_matrix(rows: &[MatrixRow], file: impl AsRef<Path>) -> Result<()> {
    write_json(file, &rows)
}
