//! Path collections: CSV persistence, synthetic generation, feature scaling
//! and train/test splitting.
//!
//! The on-disk format is one row per increment:
//!
//! ```text
//! path_id,step,eps1,eps2,phi,eps_bar,eps_bar_fail,damage
//! ```
//!
//! Floats are written in shortest round-trip decimal form, so a save/load
//! cycle reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deformation::{
    generate_bilinear_path, BilinearSpec, FailureCurve, LoadingPath, StrainState, DEFAULT_DT,
};
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 8] = [
    "path_id",
    "step",
    "eps1",
    "eps2",
    "phi",
    "eps_bar",
    "eps_bar_fail",
    "damage",
];

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
pub const DEFAULT_SPLIT_SEED: u64 = 42;

/// Number of input features per step: (ε1, ε2, φ).
pub const N_FEATURES: usize = 3;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PathDataset {
    pub paths: Vec<LoadingPath>,
    pub normalization: Option<Normalization>,
    pub split_seed: u64,
}

impl PathDataset {
    pub fn new(paths: Vec<LoadingPath>) -> Result<Self> {
        let ds = Self {
            paths,
            normalization: None,
            split_seed: DEFAULT_SPLIT_SEED,
        };
        ds.check_shape()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Common step count, `None` for an empty dataset.
    pub fn n_steps(&self) -> Option<usize> {
        self.paths.first().map(LoadingPath::len)
    }

    pub fn ids(&self) -> Vec<u64> {
        self.paths.iter().map(|p| p.path_id).collect()
    }

    pub fn get(&self, path_id: u64) -> Option<&LoadingPath> {
        self.paths.iter().find(|p| p.path_id == path_id)
    }

    fn check_shape(&self) -> Result<()> {
        if let Some(n) = self.n_steps() {
            if let Some(bad) = self.paths.iter().find(|p| p.len() != n) {
                return Err(Error::DatasetShape(format!(
                    "path {} has {} steps, expected {n}",
                    bad.path_id,
                    bad.len()
                )));
            }
        }
        Ok(())
    }
}

/// Header names used when reading a file whose columns are named differently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub path_id: String,
    pub step: String,
    pub eps1: String,
    pub eps2: String,
    pub phi: String,
    pub eps_bar: String,
    pub eps_bar_fail: String,
    pub damage: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        let [path_id, step, eps1, eps2, phi, eps_bar, eps_bar_fail, damage] =
            CSV_COLUMNS.map(String::from);
        Self {
            path_id,
            step,
            eps1,
            eps2,
            phi,
            eps_bar,
            eps_bar_fail,
            damage,
        }
    }
}

impl ColumnMap {
    fn names(&self) -> [&str; 8] {
        [
            &self.path_id,
            &self.step,
            &self.eps1,
            &self.eps2,
            &self.phi,
            &self.eps_bar,
            &self.eps_bar_fail,
            &self.damage,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub columns: ColumnMap,
    /// Tolerance for re-deriving ε̄ and D from the strains; `None` skips the ε̄ recomputation.
    pub revalidate_tolerance: Option<f64>,
    /// The file format carries no sampling interval.
    pub dt: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            columns: ColumnMap::default(),
            revalidate_tolerance: Some(1e-6),
            dt: DEFAULT_DT,
        }
    }
}

pub fn load_csv(file: impl AsRef<Path>) -> Result<PathDataset> {
    load_csv_with(file, &LoadOptions::default())
}

pub fn load_csv_with(file: impl AsRef<Path>, options: &LoadOptions) -> Result<PathDataset> {
    let file = file.as_ref();
    let handle = std::fs::File::open(file).map_err(|e| Error::io(file, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(handle);
    let headers = reader.headers()?.clone();
    let mut index = [0usize; 8];
    for (slot, name) in index.iter_mut().zip(options.columns.names()) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema {
                row: 1,
                column: name.to_string(),
                message: "missing column".into(),
            })?;
    }

    struct Partial {
        steps: Vec<StrainState>,
        eps_bar: Vec<f64>,
        fail: Option<f64>,
        damage: Vec<f64>,
    }
    let mut groups: BTreeMap<u64, Partial> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let cell = |k: usize| -> Result<&str> {
            record.get(index[k]).ok_or_else(|| Error::Schema {
                row,
                column: options.columns.names()[k].to_string(),
                message: "missing cell".into(),
            })
        };
        let int = |k: usize| -> Result<u64> {
            cell(k)?.trim().parse::<u64>().map_err(|e| Error::Schema {
                row,
                column: options.columns.names()[k].to_string(),
                message: e.to_string(),
            })
        };
        let float = |k: usize| -> Result<f64> {
            let text = cell(k)?.trim();
            match text.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Schema {
                    row,
                    column: options.columns.names()[k].to_string(),
                    message: format!("not a finite number: {text:?}"),
                }),
            }
        };

        let path_id = int(0)?;
        let step = int(1)? as usize;
        let entry = groups.entry(path_id).or_insert_with(|| Partial {
            steps: Vec::new(),
            eps_bar: Vec::new(),
            fail: None,
            damage: Vec::new(),
        });
        if step != entry.steps.len() {
            return Err(Error::Schema {
                row,
                column: options.columns.step.clone(),
                message: format!("expected step {}, found {step}", entry.steps.len()),
            });
        }
        entry.steps.push(StrainState {
            eps1: float(2)?,
            eps2: float(3)?,
            phi: float(4)?,
        });
        entry.eps_bar.push(float(5)?);
        let fail = float(6)?;
        match entry.fail {
            Some(prev) if prev != fail => {
                return Err(Error::Schema {
                    row,
                    column: options.columns.eps_bar_fail.clone(),
                    message: format!("eps_bar_fail changes within path {path_id}"),
                })
            }
            _ => entry.fail = Some(fail),
        }
        entry.damage.push(float(7)?);
    }

    let mut paths = Vec::with_capacity(groups.len());
    for (path_id, g) in groups {
        let path = LoadingPath {
            path_id,
            steps: g.steps,
            dt: options.dt,
            eps_bar: g.eps_bar,
            eps_bar_fail: g.fail.unwrap_or(f64::NAN),
            damage: g.damage,
        };
        path.validate(options.revalidate_tolerance)?;
        paths.push(path);
    }
    PathDataset::new(paths)
}

/// Writes `dataset` in (path_id, step) order.
pub fn save_csv(dataset: &PathDataset, file: impl AsRef<Path>) -> Result<()> {
    let file = file.as_ref();
    if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let handle = std::fs::File::create(file).map_err(|e| Error::io(file, e))?;
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(std::io::BufWriter::new(handle));
    writer.write_record(CSV_COLUMNS)?;

    let mut order: Vec<&LoadingPath> = dataset.paths.iter().collect();
    order.sort_by_key(|p| p.path_id);
    for path in order {
        let id = path.path_id.to_string();
        let fail = path.eps_bar_fail.to_string();
        for (step, s) in path.steps.iter().enumerate() {
            writer.write_record([
                id.as_str(),
                &step.to_string(),
                &s.eps1.to_string(),
                &s.eps2.to_string(),
                &s.phi.to_string(),
                &path.eps_bar[step].to_string(),
                &fail,
                &path.damage[step].to_string(),
            ])?;
        }
    }
    writer
        .flush()
        .map_err(|e| Error::io(file, e))?;
    Ok(())
}

/// Sampling ranges for synthetic bilinear paths. Each range is inclusive;
/// equal bounds pin the value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisRanges {
    pub phi1: (f64, f64),
    pub phi2: (f64, f64),
    pub switch_fraction: (f64, f64),
    /// Total length of the strain path in the (ε1, ε2) plane; the per-step
    /// magnitude is this divided by the step count.
    pub path_length: (f64, f64),
    pub failure: FailureCurve,
}

impl Default for SynthesisRanges {
    fn default() -> Self {
        use std::f64::consts::FRAC_PI_4;
        Self {
            // plane strain to equibiaxial stretching
            phi1: (0.0, FRAC_PI_4),
            phi2: (0.0, FRAC_PI_4),
            switch_fraction: (0.2, 0.8),
            path_length: (0.3, 0.4),
            failure: FailureCurve::default(),
        }
    }
}

impl SynthesisRanges {
    pub fn validate(&self) -> Result<()> {
        use std::f64::consts::PI;
        let check = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= min && hi <= max) {
                Err(Error::invalid(format!(
                    "degenerate {name} range [{lo}, {hi}] (allowed within [{min}, {max}])"
                )))
            } else {
                Ok(())
            }
        };
        check("phi1", self.phi1, -PI, PI)?;
        check("phi2", self.phi2, -PI, PI)?;
        check("switch_fraction", self.switch_fraction, 0.0, 1.0)?;
        check("path_length", self.path_length, f64::MIN_POSITIVE, f64::MAX)?;
        let f = &self.failure;
        if !(f.c0 > 0.0 && f.c1 >= 0.0 && f.phi_ref.is_finite()) {
            return Err(Error::invalid("failure curve needs c0 > 0 and c1 >= 0"));
        }
        Ok(())
    }
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.gen();
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * u
    }
}

/// Deterministic synthetic corpus of bilinear paths with ids `0..n_paths`.
pub fn synthesize(
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    ranges: &SynthesisRanges,
) -> Result<PathDataset> {
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be at least 1"));
    }
    if n_steps < 2 {
        return Err(Error::invalid("n_steps must be at least 2"));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::with_capacity(n_paths);
    for id in 0..n_paths {
        let phi1 = sample(&mut rng, ranges.phi1);
        let phi2 = sample(&mut rng, ranges.phi2);
        let switch_fraction = sample(&mut rng, ranges.switch_fraction);
        let length = sample(&mut rng, ranges.path_length);
        let spec = BilinearSpec {
            phi1,
            phi2,
            switch_fraction,
            n_steps,
            step_magnitude: length / n_steps as f64,
            eps_bar_fail: ranges.failure.eval(phi2),
        };
        let mut path = generate_bilinear_path(&spec)?;
        path.path_id = id as u64;
        paths.push(path);
    }
    let mut ds = PathDataset::new(paths)?;
    ds.split_seed = seed;
    Ok(ds)
}

/// Per-feature affine scaling of (ε1, ε2, φ): `x' = (x - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: [f64; N_FEATURES],
    pub scale: [f64; N_FEATURES],
    /// Features whose variance was zero; their scale was clamped to 1.
    #[serde(default)]
    pub zero_variance: [bool; N_FEATURES],
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            shift: [0.0; N_FEATURES],
            scale: [1.0; N_FEATURES],
            zero_variance: [false; N_FEATURES],
        }
    }

    /// z-score statistics over every increment of every path.
    pub fn fit(dataset: &PathDataset) -> Result<Self> {
        let count: usize = dataset.paths.iter().map(LoadingPath::len).sum();
        if count == 0 {
            return Err(Error::invalid("cannot fit normalization on an empty dataset"));
        }
        let column = |k: usize| {
            dataset
                .paths
                .iter()
                .flat_map(|p| p.steps.iter())
                .map(move |s| raw_feature(s, k))
        };
        let mut out = Self::identity();
        for k in 0..N_FEATURES {
            let first = column(k).next().unwrap_or(0.0);
            if column(k).all(|v| v == first) {
                out.shift[k] = first;
                out.scale[k] = 1.0;
                out.zero_variance[k] = true;
                continue;
            }
            let mean = column(k).sum::<f64>() / count as f64;
            let var = column(k).map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
            out.shift[k] = mean;
            if var > 0.0 {
                out.scale[k] = var.sqrt();
            } else {
                out.zero_variance[k] = true;
            }
        }
        Ok(out)
    }

    pub fn has_zero_variance(&self) -> bool {
        self.zero_variance.iter().any(|&z| z)
    }

    /// Scaled feature matrix of shape (steps, 3).
    pub fn transform(&self, path: &LoadingPath) -> Array2<f64> {
        let mut out = Array2::zeros((path.len(), N_FEATURES));
        for (t, s) in path.steps.iter().enumerate() {
            for k in 0..N_FEATURES {
                out[[t, k]] = (raw_feature(s, k) - self.shift[k]) / self.scale[k];
            }
        }
        out
    }

    /// Applies the scaling to an already-built feature matrix.
    pub fn apply(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut out = features.clone();
        for mut row in out.rows_mut() {
            for k in 0..N_FEATURES {
                row[k] = (row[k] - self.shift[k]) / self.scale[k];
            }
        }
        out
    }
}

fn raw_feature(s: &StrainState, k: usize) -> f64 {
    match k {
        0 => s.eps1,
        1 => s.eps2,
        _ => s.phi,
    }
}

/// Unscaled feature matrix of shape (steps, 3).
pub fn raw_features(path: &LoadingPath) -> Array2<f64> {
    Normalization::identity().transform(path)
}

/// Scaled inputs paired with their (unscaled) damage targets.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDataset {
    pub path_ids: Vec<u64>,
    pub features: Vec<Array2<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl NormalizedDataset {
    pub fn from_paths(dataset: &PathDataset, norm: &Normalization) -> Self {
        Self {
            path_ids: dataset.ids(),
            features: dataset.paths.iter().map(|p| norm.transform(p)).collect(),
            targets: dataset.paths.iter().map(|p| p.damage.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Fits z-score parameters on `dataset` and returns the scaled view with them.
pub fn normalize_fit_transform(dataset: &PathDataset) -> Result<(NormalizedDataset, Normalization)> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot normalize an empty dataset"));
    }
    let norm = Normalization::fit(dataset)?;
    Ok((NormalizedDataset::from_paths(dataset, &norm), norm))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: PathDataset,
    pub test: PathDataset,
    pub fraction: f64,
}

/// Seeded shuffle then cut at `round(fraction * n)`. Both sides keep id order.
pub fn split(dataset: &PathDataset, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_train = (fraction * n as f64).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    let (train_idx, test_idx) = order.split_at(n_train.min(n));
    let side = |idx: &[usize]| {
        let mut paths: Vec<LoadingPath> = idx.iter().map(|&i| dataset.paths[i].clone()).collect();
        paths.sort_by_key(|p| p.path_id);
        PathDataset {
            paths,
            normalization: dataset.normalization,
            split_seed: seed,
        }
    };
    Ok(DatasetSplit {
        train: side(train_idx),
        test: side(test_idx),
        fraction,
    })
}
