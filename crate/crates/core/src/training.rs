//! Mini-batch MSE training with Adam and early stopping on the held-out split.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RngStream};
use crate::dataset::{DatasetSplit, NormalizedDataset};
use crate::error::{Error, Result};
use crate::models::{read_json, write_json, SequenceModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::invalid("adam betas must lie in [0, 1) and epsilon be positive"));
        }
        Ok(())
    }
}

/// Per-epoch convergence record. Epochs are numbered from 1.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training-mode batch loss seen during each epoch.
    pub train_mse: Vec<f64>,
    /// Inference-mode MSE on the held-out split after each epoch.
    pub val_mse: Vec<f64>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    /// Inference-mode MSE of the returned (best) parameters on the training split.
    pub best_train_mse: f64,
    /// Not persisted, so reruns produce identical files.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl PartialEq for TrainHistory {
    fn eq(&self, other: &Self) -> bool {
        self.train_mse == other.train_mse
            && self.val_mse == other.val_mse
            && self.stopped_epoch == other.stopped_epoch
            && self.best_epoch == other.best_epoch
            && self.best_train_mse.to_bits() == other.best_train_mse.to_bits()
    }
}

impl TrainHistory {
    pub fn best_val_mse(&self) -> f64 {
        self.val_mse.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn save(&self, file: impl AsRef<Path>) -> Result<()> {
        write_json(file, self)
    }

    pub fn load(file: impl AsRef<Path>) -> Result<Self> {
        read_json(file)
    }
}

/// Mean over paths of the per-path mean squared error.
pub fn mse_loss(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "mse_loss",
            left: (pred.len(), 0),
            right: (target.len(), 0),
        });
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        if p.len() != t.len() || p.is_empty() {
            return Err(Error::Shape {
                op: "mse_loss",
                left: (1, p.len()),
                right: (1, t.len()),
            });
        }
        let sq: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq / p.len() as f64;
    }
    Ok(total / pred.len() as f64)
}

/// First and second moment estimates, one pair per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(params: &[Array2<f64>]) -> Self {
        Self {
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based). `names` label the
/// blocks for diagnostics.
pub fn adam_step(
    params: &mut [Array2<f64>],
    grads: &[Array2<f64>],
    state: &mut AdamState,
    config: &TrainConfig,
    t: usize,
    names: &[String],
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("adam step count starts at 1"));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid("adam: parameter, gradient and state counts differ"));
    }
    for (k, g) in grads.iter().enumerate() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                block: names.get(k).cloned().unwrap_or_else(|| format!("#{k}")),
            });
        }
    }
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for k in 0..params.len() {
        let (p, g, m, v) = (&mut params[k], &grads[k], &mut state.m[k], &mut state.v[k]);
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            });
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

/// Patience-based stopping rule over a validation curve.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Waiting,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    pub fn observe(&mut self, val: f64) -> Progress {
        self.epoch += 1;
        if val < self.best {
            self.best = val;
            self.best_epoch = self.epoch;
            Progress::Improved
        } else if self.epoch - self.best_epoch >= self.patience {
            Progress::Stop
        } else {
            Progress::Waiting
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Inference-mode MSE (mean over paths of per-path MSE).
pub fn evaluate_mse(model: &SequenceModel, data: &NormalizedDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut rng = RngStream::new(0);
    let mut total = 0.0;
    for chunk in length_chunks(data, &(0..data.len()).collect::<Vec<_>>(), model.graph_batch()) {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let batch: Vec<&Array2<f64>> = chunk.iter().map(|&i| &data.features[i]).collect();
        let out = model.forward(&mut g, &p, &batch, false, &mut rng)?;
        for (row, &i) in g.value(out).rows().into_iter().zip(&chunk) {
            let t = &data.targets[i];
            let sq: f64 = row.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            total += sq / t.len() as f64;
        }
    }
    Ok(total / data.len() as f64)
}

/// Splits `indices` into runs of equal sequence length, at most `size` long.
fn length_chunks(data: &NormalizedDataset, indices: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut chunks: Vec<Vec<usize>> = Vec::new();
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in indices {
        by_len.entry(data.features[i].nrows()).or_default().push(i);
    }
    for (_, group) in by_len {
        for c in group.chunks(size.max(1)) {
            chunks.push(c.to_vec());
        }
    }
    chunks
}

/// Loss and accumulated parameter gradients for one mini-batch.
fn batch_gradients(
    model: &SequenceModel,
    data: &NormalizedDataset,
    batch: &[usize],
    rng: &mut RngStream,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut grads: Vec<Array2<f64>> = model
        .params()
        .tensors()
        .iter()
        .map(|t| Array2::zeros(t.dim()))
        .collect();
    let mut loss = 0.0;
    let total = batch.len() as f64;
    for chunk in length_chunks(data, batch, model.graph_batch()) {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, true);
        let inputs: Vec<&Array2<f64>> = chunk.iter().map(|&i| &data.features[i]).collect();
        let pred = model.forward(&mut g, &p, &inputs, true, rng)?;
        let (rows, cols) = g.shape(pred);
        let target = Array2::from_shape_fn((rows, cols), |(r, c)| data.targets[chunk[r]][c]);
        let target = g.constant(target);
        let mse = g.mse(pred, target)?;
        let weighted = g.scale(mse, chunk.len() as f64 / total);
        loss += g.scalar(weighted);
        g.backward(weighted)?;
        for (acc, gr) in grads.iter_mut().zip(p.grads(&g, model.params())) {
            *acc += &gr;
        }
    }
    Ok((loss, grads))
}

/// Trains a copy of `model` and returns it with the best-epoch parameters.
///
/// The input scaling is refit on the training split. Validation uses the
/// test split.
pub fn train(model: &SequenceModel, split: &DatasetSplit, config: &TrainConfig) -> Result<(SequenceModel, TrainHistory)> {
    config.validate()?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::invalid("both sides of the split must be nonempty"));
    }
    let started = Instant::now();
    let mut model = model.clone();
    let norm = model.fit_normalization(&split.train)?;
    let train_data = NormalizedDataset::from_paths(&split.train, &norm);
    let val_data = NormalizedDataset::from_paths(&split.test, &norm);

    let mut rng = RngStream::new(config.seed);
    let names = model.params().names().to_vec();
    let mut adam = AdamState::new(model.params().tensors());
    let mut step = 0usize;
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_params = model.params().clone();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(rng.inner());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, mut grads) = batch_gradients(&model, &train_data, batch, &mut rng)?;
            if !loss.is_finite() {
                history.stopped_epoch = epoch;
                history.wall_time_secs = started.elapsed().as_secs_f64();
                return Err(Error::Diverged {
                    epoch,
                    history: Box::new(history),
                });
            }
            epoch_loss += loss * batch.len() as f64;
            if let Some(max) = config.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            step += 1;
            adam_step(
                model.params_mut().tensors_mut(),
                &grads,
                &mut adam,
                config,
                step,
                &names,
            )?;
        }
        let val = evaluate_mse(&model, &val_data)?;
        history.train_mse.push(epoch_loss / train_data.len() as f64);
        history.val_mse.push(val);
        history.stopped_epoch = epoch;
        if !val.is_finite() {
            history.wall_time_secs = started.elapsed().as_secs_f64();
            return Err(Error::Diverged {
                epoch,
                history: Box::new(history),
            });
        }
        match stopper.observe(val) {
            Progress::Improved => best_params = model.params().clone(),
            Progress::Waiting => {}
            Progress::Stop => break,
        }
    }
    *model.params_mut() = best_params;
    history.best_epoch = stopper.best_epoch();
    history.best_train_mse = evaluate_mse(&model, &train_data)?;
    history.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split, synthesize, PathDataset, SynthesisRanges};
    use crate::models::{DecoderInit, ModelConfig};
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let a = vec![vec![0.1, 0.5, 0.9], vec![1.0, 2.0, 3.0]];
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let shifted: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|x| x + 0.1).collect()).collect();
        assert!((mse_loss(&shifted, &a).unwrap() - 0.01).abs() < 1e-15);
        assert!(mse_loss(&a, &a[..1]).is_err());
        assert!(mse_loss(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
    }

    proptest! {
        #[test]
        fn mse_matches_two_pass_sum(rows in proptest::collection::vec(proptest::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 20), 1..6)) {
            let pred: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x.0).collect()).collect();
            let target: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x.1).collect()).collect();
            // oracle: first pass squares, second pass sums with compensation
            let squares: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|(a, b)| (a - b) * (a - b)).collect()).collect();
            let mut means = Vec::new();
            for sq in &squares {
                let (mut s, mut c) = (0.0f64, 0.0f64);
                for &x in sq {
                    let y = x - c;
                    let t = s + y;
                    c = (t - s) - y;
                    s = t;
                }
                means.push(s / sq.len() as f64);
            }
            let oracle = means.iter().sum::<f64>() / means.len() as f64;
            prop_assert!((mse_loss(&pred, &target).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut p = vec![ndarray::array![[1.0, -2.0, 0.5]]];
        let g = vec![ndarray::array![[3.0, -0.001, 1e4]]];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &cfg, 1, &["w".into()]).unwrap();
        let before = [1.0, -2.0, 0.5];
        for ((after, b), gr) in p[0].iter().zip(before).zip(g[0].iter()) {
            let moved = b - after;
            let expected = 0.01 * gr.signum();
            // |g| = 1e-3 sits within 1e-5 of the epsilon floor
            assert!(((moved - expected) / expected).abs() < 1e-4, "{moved} vs {expected}");
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let cfg = TrainConfig::default();
        let mut p = vec![ndarray::array![[1.0, 2.0]]];
        let g = vec![Array2::zeros((1, 2))];
        let mut st = AdamState::new(&p);
        for t in 1..=10 {
            adam_step(&mut p, &g, &mut st, &cfg, t, &["w".into()]).unwrap();
        }
        assert_eq!(p[0], ndarray::array![[1.0, 2.0]]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_block_name() {
        let cfg = TrainConfig::default();
        let mut p = vec![Array2::zeros((1, 1)), Array2::zeros((1, 1))];
        let g = vec![Array2::zeros((1, 1)), ndarray::array![[f64::NAN]]];
        let mut st = AdamState::new(&p);
        match adam_step(&mut p, &g, &mut st, &cfg, 1, &["a".into(), "decoder.u_h".into()]) {
            Err(Error::NonFiniteGradient { block }) => assert_eq!(block, "decoder.u_h"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(adam_step(&mut p, &[Array2::zeros((1, 1)), Array2::zeros((1, 1))], &mut st, &cfg, 0, &[]).is_err());
    }

    #[test]
    fn adam_descends_a_parabola() {
        // oracle: the same recursion simulated by hand on the scalar f(x) = x^2
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut p = vec![ndarray::array![[1.0]]];
        let mut st = AdamState::new(&p);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut trace = vec![1.0f64];
        for t in 1..=100 {
            let g = vec![p[0].mapv(|x| 2.0 * x)];
            adam_step(&mut p, &g, &mut st, &cfg, t, &["x".into()]).unwrap();
            let gs = 2.0 * x;
            m = 0.9 * m + 0.1 * gs;
            v = 0.999 * v + 0.001 * gs * gs;
            x -= 0.1 * (m / (1.0 - 0.9f64.powi(t as i32))) / ((v / (1.0 - 0.999f64.powi(t as i32))).sqrt() + 1e-8);
            assert!((p[0][[0, 0]] - x).abs() <= 1e-12);
            x = p[0][[0, 0]];
            trace.push(x);
        }
        let first_small = trace.iter().position(|x| x.abs() < 0.1).expect("reaches |x| < 0.1");
        for w in trace[..=first_small].windows(2) {
            assert!(w[1].abs() < w[0].abs());
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![ndarray::array![[3.0, 0.0]], ndarray::array![[0.0], [4.0]]];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-15);
        let after: f64 = g.iter().flat_map(|a| a.iter()).map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-15);
    }

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(1.0), Progress::Improved);
        assert_eq!(s.observe(2.0), Progress::Stop);
        assert_eq!(s.best_epoch(), 1);

        let mut s = EarlyStopping::new(3);
        let curve = [5.0, 4.0, 4.5, 3.9, 4.0, 4.0, 4.0];
        let decisions: Vec<Progress> = curve.iter().map(|&v| s.observe(v)).collect();
        assert_eq!(
            decisions,
            [
                Progress::Improved,
                Progress::Improved,
                Progress::Waiting,
                Progress::Improved,
                Progress::Waiting,
                Progress::Waiting,
                Progress::Stop
            ]
        );
        assert_eq!(s.best_epoch(), 4);
    }

    fn tiny_split() -> DatasetSplit {
        let ds = synthesize(10, 12, 4, &SynthesisRanges::default()).unwrap();
        split(&ds, 0.8, 1).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_returns_best_epoch() {
        let model = SequenceModel::new(
            ModelConfig::Transformer {
                d_model: 8,
                heads: 2,
                d_ff: 16,
                dropout: 0.1,
                mask: Default::default(),
                positional: Default::default(),
            },
            3,
        )
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            batch_size: 4,
            max_epochs: 12,
            patience: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let split = tiny_split();
        let (m1, h1) = train(&model, &split, &cfg).unwrap();
        let (m2, h2) = train(&model, &split, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert!(h1.stopped_epoch <= cfg.max_epochs);
        assert!(h1.stopped_epoch - h1.best_epoch <= cfg.patience);
        assert_eq!(h1.val_mse[h1.best_epoch - 1], h1.best_val_mse());
        let norm = *m1.normalization().unwrap();
        let val = NormalizedDataset::from_paths(&split.test, &norm);
        assert_eq!(evaluate_mse(&m1, &val).unwrap(), h1.best_val_mse());
    }

    #[test]
    fn training_rejects_bad_config_and_empty_split() {
        let model = SequenceModel::new(
            ModelConfig::EncoderDecoderGru {
                hidden: 4,
                decoder_init: DecoderInit::Encoder,
            },
            0,
        )
        .unwrap();
        let split = tiny_split();
        for cfg in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { patience: 0, ..TrainConfig::default() },
        ] {
            assert!(train(&model, &split, &cfg).is_err());
        }
        let empty = DatasetSplit {
            test: PathDataset::default(),
            ..split
        };
        assert!(train(&model, &empty, &TrainConfig::default()).is_err());
    }

    #[test]
    fn huge_learning_rate_diverges_with_history() {
        let model = SequenceModel::new(
            ModelConfig::Conv1d {
                filters: 4,
                kernel: 3,
                padding: Default::default(),
            },
            0,
        )
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            clip_norm: None,
            max_epochs: 50,
            patience: 50,
            ..TrainConfig::default()
        };
        match train(&model, &tiny_split(), &cfg) {
            Err(Error::Diverged { history, .. }) => assert!(history.stopped_epoch >= 1),
            Err(Error::NonFiniteGradient { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
