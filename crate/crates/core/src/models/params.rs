use std::ops::Index;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RngStream, Var};
use crate::error::{Error, Result};

/// Position of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight matrix drawn from U(-sqrt(1/fan_in), sqrt(1/fan_in)), fan_in = rows.
    pub fn add_weight(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut RngStream) -> ParamId {
        let bound = (1.0 / rows as f64).sqrt();
        let w = Array2::from_shape_simple_fn((rows, cols), || rng.uniform_in(-bound, bound));
        self.add(name, w)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::ones((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    /// Places every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    pub fn to_records(&self) -> Vec<ParamRecord> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| ParamRecord {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
                data: t.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrites the tensors from `records`, which must match names and shapes exactly.
    pub fn load_records(&mut self, records: &[ParamRecord]) -> Result<()> {
        if records.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameter blocks, model expects {}",
                records.len(),
                self.tensors.len()
            )));
        }
        for ((name, t), rec) in self.names.iter().zip(self.tensors.iter_mut()).zip(records) {
            if &rec.name != name || rec.shape != [t.nrows(), t.ncols()] {
                return Err(Error::invalid(format!(
                    "parameter block mismatch: expected `{name}` {:?}, found `{}` {:?}",
                    t.dim(),
                    rec.name,
                    rec.shape
                )));
            }
            *t = Array2::from_shape_vec((rec.shape[0], rec.shape[1]), rec.data.clone())
                .map_err(|e| Error::invalid(format!("parameter `{name}`: {e}")))?;
        }
        Ok(())
    }
}

/// One flattened (row-major) parameter block as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Graph handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles already in store order, e.g. from a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients in store order; zero for blocks the loss did not reach.
    pub fn grads(&self, g: &Graph, store: &ParamStore) -> Vec<Array2<f64>> {
        self.0
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Array2::zeros(t.dim())))
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
