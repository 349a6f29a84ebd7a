//! Two-layer 1-D convolutional network: conv(F filters) -> ReLU -> conv(1 filter).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use crate::autograd::{Graph, RngStream, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// `k - 1` zeros on the left only; output `t` sees inputs `..= t`.
    Causal,
    /// `⌊(k-1)/2⌋` zeros on the left and the remainder on the right
    /// (length-preserving "same" padding).
    #[default]
    Symmetric,
}

impl Padding {
    /// (left, right) zero rows for a kernel of size `k`.
    pub fn pads(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Causal => (kernel - 1, 0),
            Padding::Symmetric => {
                let left = (kernel - 1) / 2;
                (left, kernel - 1 - left)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dNet {
    pub input_dim: usize,
    pub filters: usize,
    pub kernel: usize,
    pub padding: Padding,
    /// `(kernel * input_dim, filters)`, tap-major rows.
    pub w1: ParamId,
    pub b1: ParamId,
    /// `(kernel * filters, 1)`.
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Conv1dNet {
    pub fn init(
        store: &mut ParamStore,
        input_dim: usize,
        filters: usize,
        kernel: usize,
        padding: Padding,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if kernel == 0 || filters == 0 {
            return Err(Error::invalid("kernel size and filter count must be positive"));
        }
        let w1 = store.add_weight("conv1.w", kernel * input_dim, filters, rng);
        let b1 = store.add_zeros("conv1.b", 1, filters);
        let w2 = store.add_weight("conv2.w", kernel * filters, 1, rng);
        let b2 = store.add_zeros("conv2.b", 1, 1);
        Ok(Self {
            input_dim,
            filters,
            kernel,
            padding,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn param_count(input_dim: usize, filters: usize, kernel: usize) -> usize {
        kernel * input_dim * filters + filters + kernel * filters + 1
    }

    /// How many steps past `t` can influence output `t`.
    pub fn right_reach(&self) -> usize {
        2 * self.padding.pads(self.kernel).1
    }

    /// Predictions `(steps, 1)` for one `(steps, input_dim)` sequence.
    pub fn forward_one(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (len, width) = g.shape(x);
        if width != self.input_dim || len == 0 {
            return Err(Error::Shape {
                op: "conv1d_forward",
                left: (len, width),
                right: (len.max(1), self.input_dim),
            });
        }
        let (left, right) = self.padding.pads(self.kernel);
        let cols = g.im2col(x, self.kernel, left, right)?;
        let h = g.matmul(cols, p[self.w1])?;
        let h = g.add_row(h, p[self.b1])?;
        let h = g.relu(h);
        let cols = g.im2col(h, self.kernel, left, right)?;
        let y = g.matmul(cols, p[self.w2])?;
        g.add_row(y, p[self.b2])
    }

    /// Predictions `(batch, steps)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &[&Array2<f64>]) -> Result<Var> {
        let mut rows = Vec::with_capacity(batch.len());
        for x in batch {
            let xv = g.constant((*x).clone());
            let y = self.forward_one(g, p, xv)?;
            rows.push(g.transpose(y));
        }
        if rows.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        g.concat_rows(&rows)
    }
}
