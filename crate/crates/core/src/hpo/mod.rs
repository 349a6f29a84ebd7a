//! Bayesian hyperparameter search and the study record it produces.
//!
//! The first [`N_INITIAL`] suggestions are a shifted Halton sequence. Later
//! ones maximise expected improvement under a Matérn-5/2 GP fitted to
//! `log10(test MSE)` in unit-cube coordinates.

pub mod gp;
pub mod space;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::RngStream;
use crate::dataset::DatasetSplit;
use crate::error::{Error, Result};
use crate::models::{
    read_json, write_json, ArchitectureTag, DecoderInit, MaskMode, ModelConfig, Padding, PositionalEncoding,
    SequenceModel, DEFAULT_TRANSFORMER_DROPOUT,
};
use crate::training::{train, TrainConfig, TrainHistory};

pub use gp::{expected_improvement, GaussianProcess};
pub use space::{Configuration, Dimension, DimensionKind, SearchSpace};

/// Quasi-random trials before the surrogate takes over.
pub const N_INITIAL: usize = 5;
/// Random starting points for the acquisition search.
pub const N_CANDIDATES: usize = 1024;
pub const STUDY_FORMAT: &str = "damage-seq/study/v1";

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Van der Corput radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut out = 0.0;
    let mut f = inv;
    while index > 0 {
        out += (index % base) as f64 * f;
        index /= base;
        f *= inv;
    }
    out
}

/// Halton point `index` in `dims` dimensions, shifted modulo 1.
pub fn halton(index: u64, shift: &[f64]) -> Vec<f64> {
    shift
        .iter()
        .zip(PRIMES)
        .map(|(s, b)| (radical_inverse(index, b) + s).fract())
        .collect()
}

/// A finished evaluation: where, and the value to minimise.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub config: Configuration,
    pub value: f64,
}

pub fn random_configuration(space: &SearchSpace, rng: &mut RngStream) -> Configuration {
    let u: Vec<f64> = (0..space.len()).map(|_| rng.uniform()).collect();
    space.decode(&u)
}

/// Next configuration to evaluate given everything observed so far.
///
/// `trials_so_far` counts every earlier trial, including ones with no usable
/// observation, so the quasi-random phase advances even past failures.
pub fn suggest(space: &SearchSpace, observations: &[Observation], trials_so_far: usize, rng: &mut RngStream) -> Configuration {
    if trials_so_far < N_INITIAL || observations.len() < 2 {
        let mut shift_rng = RngStream::new(rng.seed());
        let shift: Vec<f64> = (0..space.len()).map(|_| shift_rng.uniform()).collect();
        if trials_so_far < N_INITIAL && space.len() <= PRIMES.len() {
            return space.decode(&halton(trials_so_far as u64 + 1, &shift));
        }
        return random_configuration(space, rng);
    }
    let x: Vec<Vec<f64>> = observations.iter().map(|o| space.encode(&o.config)).collect();
    let y: Vec<f64> = observations.iter().map(|o| o.value).collect();
    let Some(model) = GaussianProcess::fit(&x, &y) else {
        return random_configuration(space, rng);
    };
    let best = y.iter().copied().fold(f64::INFINITY, f64::min);
    let acquisition = |u: &[f64]| {
        let (m, s) = model.predict(u);
        expected_improvement(m, s, best)
    };

    let mut starts: Vec<(f64, Vec<f64>)> = (0..N_CANDIDATES)
        .map(|_| {
            let u: Vec<f64> = (0..space.len()).map(|_| rng.uniform()).collect();
            (acquisition(&u), u)
        })
        .collect();
    starts.sort_by(|a, b| b.0.total_cmp(&a.0));
    starts.truncate(4);

    // Shrinking random-perturbation hill climb from the best starts.
    let mut winner = starts[0].clone();
    for (mut ei, mut u) in starts {
        for round in 0..30 {
            let step = 0.1 * 0.9f64.powi(round);
            let cand: Vec<f64> = u.iter().map(|v| (v + step * (2.0 * rng.uniform() - 1.0)).clamp(0.0, 1.0)).collect();
            let e = acquisition(&cand);
            if e > ei {
                ei = e;
                u = cand;
            }
        }
        if ei > winner.0 {
            winner = (ei, u);
        }
    }
    space.decode(&winner.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    #[default]
    Bayesian,
    Random,
}

/// Sequential minimisation of `objective`; returns every value in order.
pub fn minimize(
    space: &SearchSpace,
    mut objective: impl FnMut(&Configuration) -> f64,
    n_trials: usize,
    seed: u64,
    mode: SearchMode,
) -> Vec<f64> {
    let mut rng = RngStream::new(seed);
    let mut obs = Vec::with_capacity(n_trials);
    let mut values = Vec::with_capacity(n_trials);
    for t in 0..n_trials {
        let cfg = match mode {
            SearchMode::Bayesian => suggest(space, &obs, t, &mut rng),
            SearchMode::Random => random_configuration(space, &mut rng),
        };
        let v = objective(&cfg);
        values.push(v);
        if v.is_finite() {
            obs.push(Observation { config: cfg, value: v });
        }
    }
    values
}

/// Branin-Hoo function, global minimum about 0.397887.
pub fn branin(x1: f64, x2: f64) -> f64 {
    use std::f64::consts::PI;
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

/// The usual Branin domain `x1 in [-5, 10], x2 in [0, 15]`.
pub fn branin_space() -> SearchSpace {
    SearchSpace {
        architecture: None,
        dimensions: vec![
            Dimension::new("x1", DimensionKind::Linear, -5.0, 10.0),
            Dimension::new("x2", DimensionKind::Linear, 0.0, 15.0),
        ],
    }
}

/// Settings the search does not vary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelVariant {
    pub decoder_init: DecoderInit,
    pub padding: Padding,
    pub mask: MaskMode,
    pub positional: PositionalEncoding,
    pub dropout: f64,
}

impl Default for ModelVariant {
    fn default() -> Self {
        Self {
            decoder_init: DecoderInit::Encoder,
            padding: Padding::Symmetric,
            mask: MaskMode::None,
            positional: PositionalEncoding::None,
            dropout: DEFAULT_TRANSFORMER_DROPOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySettings {
    pub n_trials: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub patience: usize,
    pub mode: SearchMode,
    pub variant: ModelVariant,
}

impl Default for StudySettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            n_trials: 20,
            seed: 0,
            max_epochs: t.max_epochs,
            patience: t.patience,
            mode: SearchMode::Bayesian,
            variant: ModelVariant::default(),
        }
    }
}

fn dim(cfg: &Configuration, name: &str) -> Result<f64> {
    cfg.get(name)
        .copied()
        .ok_or_else(|| Error::invalid(format!("configuration lacks `{name}`")))
}

/// Model hyperparameters for a sampled configuration.
pub fn model_config(tag: ArchitectureTag, cfg: &Configuration, variant: &ModelVariant) -> Result<ModelConfig> {
    Ok(match tag {
        ArchitectureTag::Gru => ModelConfig::EncoderDecoderGru {
            hidden: dim(cfg, "hidden")? as usize,
            decoder_init: variant.decoder_init,
        },
        ArchitectureTag::Cnn => ModelConfig::Conv1d {
            filters: dim(cfg, "filters")? as usize,
            kernel: dim(cfg, "kernel")? as usize,
            padding: variant.padding,
        },
        ArchitectureTag::Transformer => ModelConfig::Transformer {
            d_model: dim(cfg, "d_model")? as usize,
            heads: dim(cfg, "heads")? as usize,
            d_ff: dim(cfg, "d_ff")? as usize,
            dropout: variant.dropout,
            mask: variant.mask,
            positional: variant.positional,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub trial: usize,
    pub config: Configuration,
    pub model: ModelConfig,
    pub param_count: usize,
    pub status: TrialStatus,
    pub train_mse: Option<f64>,
    pub test_mse: Option<f64>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Study {
    pub format: String,
    pub architecture: ArchitectureTag,
    pub space: SearchSpace,
    pub settings: StudySettings,
    pub trials: Vec<TrialRecord>,
    pub best_trial: usize,
}

impl Study {
    pub fn best(&self) -> &TrialRecord {
        &self.trials[self.best_trial]
    }

    /// Running minimum of test MSE over ok trials; `None` until the first.
    pub fn best_so_far(&self) -> Vec<Option<f64>> {
        let mut best: Option<f64> = None;
        self.trials
            .iter()
            .map(|t| {
                if let Some(v) = t.test_mse {
                    best = Some(best.map_or(v, |b| b.min(v)));
                }
                best
            })
            .collect()
    }

    pub fn save(&self, file: impl AsRef<Path>) -> Result<()> {
        write_json(file, self)
    }

    pub fn load(file: impl AsRef<Path>) -> Result<Self> {
        let s: Study = read_json(file)?;
        if s.format != STUDY_FORMAT {
            return Err(Error::invalid(format!("unknown study format `{}`", s.format)));
        }
        if s.best_trial >= s.trials.len() {
            return Err(Error::invalid("best trial index out of range"));
        }
        Ok(s)
    }

    /// One row per trial: index, status, MSEs, running best, then every
    /// dimension in space order.
    pub fn save_csv(&self, file: impl AsRef<Path>) -> Result<()> {
        let file = file.as_ref();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(file)
            .map_err(|e| Error::invalid(format!("{}: {e}", file.display())))?;
        let mut header = vec!["trial", "status", "train_mse", "test_mse", "best_so_far"];
        header.extend(self.space.dimensions.iter().map(|d| d.name.as_str()));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (t, best) in self.trials.iter().zip(self.best_so_far()) {
            let status = match t.status {
                TrialStatus::Ok => "ok",
                TrialStatus::Diverged => "diverged",
            };
            let mut row = vec![t.trial.to_string(), status.into(), opt(t.train_mse), opt(t.test_mse), opt(best)];
            row.extend(self.space.dimensions.iter().map(|d| opt(t.config.get(&d.name).copied())));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(file, e))
    }
}

/// Surrogate targets: log10 test MSE, with diverged trials pinned at ten
/// times the worst finished one.
fn observations(trials: &[TrialRecord]) -> Vec<Observation> {
    let worst = trials.iter().filter_map(|t| t.test_mse).fold(f64::NAN, f64::max);
    trials
        .iter()
        .filter_map(|t| {
            let mse = match t.test_mse {
                Some(v) => v,
                None if worst.is_finite() => worst * 10.0,
                None => return None,
            };
            Some(Observation {
                config: t.config.clone(),
                value: mse.max(1e-300).log10(),
            })
        })
        .collect()
}

/// Runs a study and returns it with the best trial's trained model.
pub fn run_study_with_best(
    tag: ArchitectureTag,
    space: &SearchSpace,
    split: &DatasetSplit,
    settings: &StudySettings,
) -> Result<(Study, SequenceModel)> {
    space.validate()?;
    if space.architecture != Some(tag) {
        return Err(Error::invalid(format!("search space does not describe {tag}")));
    }
    if settings.n_trials == 0 {
        return Err(Error::invalid("a study needs at least one trial"));
    }
    let mut rng = RngStream::new(settings.seed);
    let mut trials: Vec<TrialRecord> = Vec::with_capacity(settings.n_trials);
    let mut best: Option<(f64, usize, SequenceModel)> = None;

    for t in 0..settings.n_trials {
        let cfg = match settings.mode {
            SearchMode::Bayesian => suggest(space, &observations(&trials), t, &mut rng),
            SearchMode::Random => random_configuration(space, &mut rng),
        };
        let model_cfg = model_config(tag, &cfg, &settings.variant)?;
        let trial_seed = settings.seed.wrapping_add(1 + t as u64);
        let model = SequenceModel::new(model_cfg.clone(), trial_seed)?;
        let train_cfg = TrainConfig {
            learning_rate: dim(&cfg, "learning_rate")?,
            batch_size: dim(&cfg, "batch_size")? as usize,
            max_epochs: settings.max_epochs,
            patience: settings.patience,
            seed: trial_seed,
            ..TrainConfig::default()
        };
        let mut record = TrialRecord {
            trial: t,
            config: cfg,
            model: model_cfg,
            param_count: model.param_count(),
            status: TrialStatus::Ok,
            train_mse: None,
            test_mse: None,
            history: TrainHistory::default(),
        };
        match train(&model, split, &train_cfg) {
            Ok((trained, history)) => {
                let test = history.best_val_mse();
                record.train_mse = Some(history.best_train_mse);
                record.test_mse = Some(test);
                record.history = history;
                if best.as_ref().is_none_or(|b| test < b.0) {
                    best = Some((test, t, trained));
                }
            }
            Err(Error::Diverged { history, .. }) => {
                record.status = TrialStatus::Diverged;
                record.history = *history;
            }
            Err(e) if e.is_numeric() => record.status = TrialStatus::Diverged,
            Err(e) => return Err(e),
        }
        trials.push(record);
    }
    let Some((_, best_trial, model)) = best else {
        return Err(Error::StudyFailed(settings.n_trials));
    };
    let study = Study {
        format: STUDY_FORMAT.into(),
        architecture: tag,
        space: space.clone(),
        settings: settings.clone(),
        trials,
        best_trial,
    };
    Ok((study, model))
}

pub fn run_study(tag: ArchitectureTag, space: &SearchSpace, split: &DatasetSplit, settings: &StudySettings) -> Result<Study> {
    run_study_with_best(tag, space, split, settings).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split, synthesize, SynthesisRanges};

    #[test]
    fn radical_inverse_values() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(6, 2), 0.375);
        assert!((radical_inverse(5, 3) - 7.0 / 9.0).abs() < 1e-15);
        assert_eq!(radical_inverse(0, 5), 0.0);
    }

    #[test]
    fn branin_minima() {
        use std::f64::consts::PI;
        for (x1, x2) in [(-PI, 12.275), (PI, 2.275), (9.42478, 2.475)] {
            assert!((branin(x1, x2) - 0.397887).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_history_gives_in_bounds_sample() {
        for tag in ArchitectureTag::ALL {
            let s = SearchSpace::for_architecture(tag);
            let cfg = suggest(&s, &[], 0, &mut RngStream::new(3));
            assert!(s.contains(&cfg), "{cfg:?}");
        }
    }

    #[test]
    fn a_thousand_suggestions_stay_in_bounds() {
        let s = SearchSpace::for_architecture(ArchitectureTag::Transformer);
        let mut rng = RngStream::new(1);
        let mut obs = Vec::new();
        for t in 0..1000 {
            // the GP phase is exercised on a sliding window to keep this fast
            let window = &obs[obs.len().saturating_sub(8)..];
            let cfg = suggest(&s, window, t, &mut rng);
            assert!(s.contains(&cfg), "{cfg:?}");
            let value = (cfg["learning_rate"].log10() + 3.0).powi(2) + cfg["d_model"] / 128.0;
            obs.push(Observation { config: cfg, value });
        }
    }

    #[test]
    fn bayesian_beats_random_on_branin() {
        let space = branin_space();
        let f = |c: &Configuration| branin(c["x1"], c["x2"]);
        let best = |v: Vec<f64>| v.into_iter().fold(f64::INFINITY, f64::min);
        let mut bo: Vec<f64> = (0..50).map(|r| best(minimize(&space, f, 20, r, SearchMode::Bayesian))).collect();
        let mut rs: Vec<f64> = (0..50).map(|r| best(minimize(&space, f, 20, 1000 + r, SearchMode::Random))).collect();
        bo.sort_by(f64::total_cmp);
        rs.sort_by(f64::total_cmp);
        let median = |v: &[f64]| 0.5 * (v[24] + v[25]);
        assert!(median(&bo) < median(&rs), "bo {} vs random {}", median(&bo), median(&rs));
    }

    fn tiny_split() -> DatasetSplit {
        let ds = synthesize(10, 10, 2, &SynthesisRanges::default()).unwrap();
        split(&ds, 0.8, 0).unwrap()
    }

    fn quick(n_trials: usize) -> StudySettings {
        StudySettings {
            n_trials,
            seed: 5,
            max_epochs: 2,
            patience: 1,
            ..StudySettings::default()
        }
    }

    #[test]
    fn single_trial_study() {
        let tag = ArchitectureTag::Cnn;
        let s = run_study(tag, &SearchSpace::for_architecture(tag), &tiny_split(), &quick(1)).unwrap();
        assert_eq!(s.trials.len(), 1);
        assert_eq!(s.best_trial, 0);
    }

    #[test]
    fn study_is_deterministic_and_round_trips() {
        let tag = ArchitectureTag::Cnn;
        let space = SearchSpace::for_architecture(tag);
        let split = tiny_split();
        let a = run_study(tag, &space, &split, &quick(7)).unwrap();
        let b = run_study(tag, &space, &split, &quick(7)).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path().join("a.json")).unwrap();
        b.save(dir.path().join("b.json")).unwrap();
        let bytes = std::fs::read(dir.path().join("a.json")).unwrap();
        assert_eq!(bytes, std::fs::read(dir.path().join("b.json")).unwrap());
        assert_eq!(Study::load(dir.path().join("a.json")).unwrap(), a);

        let best = a.best().test_mse.unwrap();
        for t in &a.trials {
            assert!(t.test_mse.is_none_or(|v| v >= best));
            assert!(space.contains(&t.config));
        }
        let running = a.best_so_far();
        for w in running.windows(2) {
            assert!(w[1].unwrap() <= w[0].unwrap());
        }
        a.save_csv(dir.path().join("a.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert!(text.starts_with("trial,status,train_mse,test_mse,best_so_far,learning_rate,filters,kernel,batch_size\n"));
    }

    #[test]
    fn mismatched_space_is_rejected() {
        let space = SearchSpace::for_architecture(ArchitectureTag::Gru);
        assert!(run_study(ArchitectureTag::Cnn, &space, &tiny_split(), &quick(1)).is_err());
        let tag = ArchitectureTag::Gru;
        assert!(run_study(tag, &space, &tiny_split(), &quick(0)).is_err());
    }

    #[test]
    fn diverged_trials_get_penalised_observations() {
        let mut a = TrialRecord {
            trial: 0,
            config: Configuration::from([("x".to_string(), 0.5)]),
            model: ModelConfig::Conv1d {
                filters: 1,
                kernel: 1,
                padding: Padding::Causal,
            },
            param_count: 0,
            status: TrialStatus::Ok,
            train_mse: Some(0.01),
            test_mse: Some(0.01),
            history: TrainHistory::default(),
        };
        let mut b = a.clone();
        b.status = TrialStatus::Diverged;
        b.test_mse = None;
        assert!(observations(&[b.clone()]).is_empty());
        a.test_mse = Some(0.1);
        let obs = observations(&[a, b]);
        assert_eq!(obs.len(), 2);
        assert!((obs[1].value - 0.0).abs() < 1e-12);
    }
}
