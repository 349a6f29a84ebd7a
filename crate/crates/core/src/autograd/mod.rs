//! Define-by-run reverse-mode differentiation over dense 2-D `f64` arrays.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node holding
//! its forward value and the handles of its inputs, so node ids are already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is limited to adding or multiplying a `1 x cols` row vector
//! onto every row of a matrix, which is all the sequence models need.

mod check;

pub use check::{gradient_check, relative_error, RELATIVE_FLOOR};

use ndarray::{s, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Epsilon added to the variance inside [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deterministic random stream used for initialisation and dropout masks.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform sample in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Independent child stream, e.g. one per training epoch.
    pub fn fork(&mut self) -> RngStream {
        RngStream::new(self.rng.gen())
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Array2<f64> },
    Im2Col { x: Var, kernel: usize, pad_left: usize },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// A computation tape. Confined to one thread; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(self.value(v))
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Accumulated adjoint, present after [`Graph::backward`] for nodes that
    /// require gradients and are reachable from the root.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    fn row_compatible(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sr,
            });
        }
        Ok(())
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_compatible("add_row", a, row)?;
        let v = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_compatible("mul_row", a, row)?;
        let v = self.value(a) * self.value(row);
        let rg = self.rg(&[a, row]);
        Ok(self.push(v, Op::MulRow(a, row), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::Shape {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Side-by-side concatenation; all parts need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero parts"))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacked concatenation; all parts need the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero parts"))?;
        let cols = self.shape(first).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a);
        if start >= end || end > sa.0 {
            return Err(Error::Shape {
                op: "slice_rows",
                left: sa,
                right: (start, end),
            });
        }
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SliceRows(a, start), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a);
        if start >= end || end > sa.1 {
            return Err(Error::Shape {
                op: "slice_cols",
                left: sa,
                right: (start, end),
            });
        }
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SliceCols(a, start), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    /// Softmax along `axis` (1: within each row, 0: within each column).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => Ok(self.softmax_rows(a, false)),
            0 => {
                let t = self.transpose(a);
                let s = self.softmax_rows(t, false);
                Ok(self.transpose(s))
            }
            _ => Err(Error::invalid(format!("softmax axis {axis} out of range"))),
        }
    }

    /// Row softmax. With `causal`, entry `(i, j)` for `j > i` is treated as a
    /// `-inf` logit, so its weight is exactly zero.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros(x.dim());
        for (i, (row, mut out)) in x.rows().into_iter().zip(v.rows_mut()).enumerate() {
            let visible = if causal { (i + 1).min(row.len()) } else { row.len() };
            let max = row
                .iter()
                .take(visible)
                .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut total = 0.0;
            for j in 0..visible {
                let e = (row[j] - max).exp();
                out[j] = e;
                total += e;
            }
            for j in 0..visible {
                out[j] /= total;
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    /// Normalises each row to zero mean and unit (population) variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut v = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in v.rows_mut() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|x| x - mean);
            let var = row.iter().map(|x| x * x).sum::<f64>() / cols;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| x * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
    /// Returns `a` itself when not training or when `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut RngStream, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = Array2::from_shape_simple_fn(self.shape(a), || {
            if rng.uniform() < rate {
                0.0
            } else {
                keep
            }
        });
        let v = self.value(a) * &mask;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Dropout { x: a, mask }, rg))
    }

    /// Unfolds a `(steps, channels)` sequence into `(steps, kernel * channels)`
    /// windows after zero padding `pad_left` rows before and `pad_right` after.
    /// Row `t` holds input rows `t - pad_left .. t - pad_left + kernel`,
    /// tap-major. Requires `pad_left + pad_right == kernel - 1`.
    pub fn im2col(&mut self, a: Var, kernel: usize, pad_left: usize, pad_right: usize) -> Result<Var> {
        if kernel == 0 || pad_left + pad_right + 1 != kernel {
            return Err(Error::invalid(format!(
                "im2col needs pad_left + pad_right = kernel - 1 (kernel {kernel}, pads {pad_left}/{pad_right})"
            )));
        }
        let x = self.value(a);
        let (steps, channels) = x.dim();
        let mut v = Array2::zeros((steps, kernel * channels));
        for t in 0..steps {
            for tap in 0..kernel {
                let src = t as isize + tap as isize - pad_left as isize;
                if src < 0 || src >= steps as isize {
                    continue;
                }
                v.slice_mut(s![t, tap * channels..(tap + 1) * channels])
                    .assign(&x.row(src as usize));
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Im2Col { x: a, kernel, pad_left }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Mean squared difference between `pred` and `target`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a `1 x 1` root. Gradients of earlier calls are cleared.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Array2::ones((1, 1)));
        for id in (0..=root.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(id, &g);
            self.nodes[id].grad = Some(g);
            for (parent, delta) in contributions {
                let node = &mut self.nodes[parent.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => *acc += &delta,
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, g: &Array2<f64>) -> Vec<(Var, Array2<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, -g));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, g * val(*b)));
                }
                if wants(*b) {
                    out.push((*b, g * val(*a)));
                }
            }
            Op::AddRow(a, row) => {
                out.push((*a, g.clone()));
                if wants(*row) {
                    out.push((*row, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
            }
            Op::MulRow(a, row) => {
                if wants(*a) {
                    out.push((*a, g * val(*row)));
                }
                if wants(*row) {
                    out.push((*row, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
            }
            Op::MatMul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.dot(&val(*b).t())));
                }
                if wants(*b) {
                    out.push((*b, val(*a).t().dot(g)));
                }
            }
            Op::Transpose(a) => out.push((*a, g.t().to_owned())),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if wants(*p) {
                        out.push((*p, g.slice(s![.., start..start + w]).to_owned()));
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    if wants(*p) {
                        out.push((*p, g.slice(s![start..start + h, ..]).to_owned()));
                    }
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(val(*a).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                out.push((*a, d));
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(val(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                out.push((*a, d));
            }
            Op::Scale(a, k) => out.push((*a, g * *k)),
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                out.push((*a, d));
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                out.push((*a, d));
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                out.push((*a, d));
            }
            Op::Square(a) => out.push((*a, g * val(*a) * 2.0)),
            Op::Softmax(a) => {
                // dx = y * (g - <g, y>) per row; masked entries have y = 0.
                let y = &node.value;
                let mut d = Array2::zeros(y.dim());
                for ((yr, gr), mut dr) in y.rows().into_iter().zip(g.rows()).zip(d.rows_mut()) {
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..yr.len() {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, d));
            }
            Op::LayerNorm { x, inv_std } => {
                // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat)) per row
                let xhat = &node.value;
                let n = xhat.ncols() as f64;
                let mut d = Array2::zeros(xhat.dim());
                for (i, ((xr, gr), mut dr)) in xhat
                    .rows()
                    .into_iter()
                    .zip(g.rows())
                    .zip(d.rows_mut())
                    .enumerate()
                {
                    let mean_g = gr.sum() / n;
                    let mean_gx: f64 = xr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..xr.len() {
                        dr[j] = inv_std[i] * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
                out.push((*x, d));
            }
            Op::Dropout { x, mask } => out.push((*x, g * mask)),
            Op::Im2Col { x, kernel, pad_left } => {
                let (steps, channels) = val(*x).dim();
                let mut d = Array2::zeros((steps, channels));
                for t in 0..steps {
                    for tap in 0..*kernel {
                        let src = t as isize + tap as isize - *pad_left as isize;
                        if src < 0 || src >= steps as isize {
                            continue;
                        }
                        let mut row = d.row_mut(src as usize);
                        row += &g.slice(s![t, tap * channels..(tap + 1) * channels]);
                    }
                }
                out.push((*x, d));
            }
            Op::Sum(a) => out.push((*a, Array2::from_elem(val(*a).dim(), g[[0, 0]]))),
            Op::Mean(a) => {
                let x = val(*a);
                out.push((*a, Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64)));
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
