//! Gated recurrent units and the two-layer encoder-decoder built from them.
//!
//! Cell update, with row-vector states so a batch of paths is a matrix:
//!
//! ```text
//! z  = σ(x W_z + h U_z + b_z)
//! r  = σ(x W_r + h U_r + b_r)
//! h~ = tanh(x W_h + (r ⊙ h) U_h + b_h)
//! h' = (1 - z) ⊙ h + z ⊙ h~
//! ```

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use crate::autograd::{Graph, RngStream, Var};
use crate::error::{Error, Result};

/// Hidden state `H_t` of one recurrent layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub hidden: Array1<f64>,
}

impl RecurrentState {
    pub fn zeros(width: usize) -> Self {
        Self {
            hidden: Array1::zeros(width),
        }
    }

    pub fn width(&self) -> usize {
        self.hidden.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruCellParams {
    pub fn init(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden_dim: usize, rng: &mut RngStream) -> Self {
        let mut gate = |g: &str| {
            (
                store.add_weight(format!("{prefix}.w_{g}"), input_dim, hidden_dim, rng),
                store.add_weight(format!("{prefix}.u_{g}"), hidden_dim, hidden_dim, rng),
                store.add_zeros(format!("{prefix}.b_{g}"), 1, hidden_dim),
            )
        };
        let (w_z, u_z, b_z) = gate("z");
        let (w_r, u_r, b_r) = gate("r");
        let (w_h, u_h, b_h) = gate("h");
        Self {
            input_dim,
            hidden_dim,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        }
    }

    pub fn param_count(input_dim: usize, hidden_dim: usize) -> usize {
        3 * (input_dim * hidden_dim + hidden_dim * hidden_dim + hidden_dim)
    }

    /// One step for a batch: `x` is `(batch, input_dim)`, `h` is `(batch, hidden_dim)`.
    pub fn step(&self, g: &mut Graph, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let (xs, hs) = (g.shape(x), g.shape(h));
        if xs.1 != self.input_dim || hs.1 != self.hidden_dim || xs.0 != hs.0 {
            return Err(Error::Shape {
                op: "gru_cell_step",
                left: xs,
                right: hs,
            });
        }
        let gate = |g: &mut Graph, w: ParamId, u: ParamId, b: ParamId, h_in: Var| -> Result<Var> {
            let xw = g.matmul(x, p[w])?;
            let hu = g.matmul(h_in, p[u])?;
            let s = g.add(xw, hu)?;
            g.add_row(s, p[b])
        };
        let z_pre = gate(g, self.w_z, self.u_z, self.b_z, h)?;
        let z = g.sigmoid(z_pre);
        let r_pre = gate(g, self.w_r, self.u_r, self.b_r, h)?;
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h)?;
        let c_pre = gate(g, self.w_h, self.u_h, self.b_h, rh)?;
        let candidate = g.tanh(c_pre);
        let keep = g.one_minus(z);
        let old = g.mul(keep, h)?;
        let new = g.mul(z, candidate)?;
        g.add(old, new)
    }

    /// Runs the cell over `inputs` (one `(batch, input_dim)` matrix per step)
    /// from `h0`, returning every hidden state.
    pub fn run(&self, g: &mut Graph, p: &Bound, inputs: &[Var], h0: Var) -> Result<Vec<Var>> {
        let mut h = h0;
        let mut states = Vec::with_capacity(inputs.len());
        for &x in inputs {
            h = self.step(g, p, x, h)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// Value-level single step: evaluates the cell without keeping a graph.
pub fn gru_cell_step(
    x: &Array1<f64>,
    h_prev: &RecurrentState,
    cell: &GruCellParams,
    store: &ParamStore,
) -> Result<RecurrentState> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.constant(x.clone().insert_axis(ndarray::Axis(0)));
    let hv = g.constant(h_prev.hidden.clone().insert_axis(ndarray::Axis(0)));
    let out = cell.step(&mut g, &p, xv, hv)?;
    Ok(RecurrentState {
        hidden: g.value(out).row(0).to_owned(),
    })
}

/// Initial state of the second (decoder) layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInit {
    /// Final hidden state of the encoder, which has read the whole input.
    #[default]
    Encoder,
    /// Zero state: the encoder is bypassed and the network is a single
    /// unidirectional GRU read step by step.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoderGru {
    pub hidden: usize,
    pub decoder_init: DecoderInit,
    pub encoder: GruCellParams,
    pub decoder: GruCellParams,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl EncoderDecoderGru {
    pub fn init(store: &mut ParamStore, input_dim: usize, hidden: usize, decoder_init: DecoderInit, rng: &mut RngStream) -> Self {
        let encoder = GruCellParams::init(store, "encoder", input_dim, hidden, rng);
        let decoder = GruCellParams::init(store, "decoder", input_dim, hidden, rng);
        let head_w = store.add_weight("head.w", hidden, 1, rng);
        let head_b = store.add_zeros("head.b", 1, 1);
        Self {
            hidden,
            decoder_init,
            encoder,
            decoder,
            head_w,
            head_b,
        }
    }

    pub fn param_count(input_dim: usize, hidden: usize) -> usize {
        2 * GruCellParams::param_count(input_dim, hidden) + hidden + 1
    }

    /// Final encoder state for a batch, `(batch, hidden)`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, steps: &[Var]) -> Result<Var> {
        let batch = g.shape(steps[0]).0;
        let h0 = g.constant(Array2::zeros((batch, self.hidden)));
        let states = self.encoder.run(g, p, steps, h0)?;
        Ok(*states.last().expect("nonempty sequence"))
    }

    /// Predictions `(batch, steps)` for equal-length feature sequences.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &[&Array2<f64>]) -> Result<Var> {
        let steps = step_inputs(g, batch, self.encoder.input_dim)?;
        let h0 = match self.decoder_init {
            DecoderInit::Encoder => self.encode(g, p, &steps)?,
            DecoderInit::Zero => g.constant(Array2::zeros((batch.len(), self.hidden))),
        };
        let states = self.decoder.run(g, p, &steps, h0)?;
        let mut outputs = Vec::with_capacity(states.len());
        for h in states {
            let y = g.matmul(h, p[self.head_w])?;
            outputs.push(g.add_row(y, p[self.head_b])?);
        }
        g.concat_cols(&outputs)
    }
}

/// Re-slices a batch of `(steps, features)` matrices into one
/// `(batch, features)` constant per step.
fn step_inputs(g: &mut Graph, batch: &[&Array2<f64>], width: usize) -> Result<Vec<Var>> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (len, _) = first.dim();
    if len == 0 {
        return Err(Error::invalid("sequence length must be at least 1"));
    }
    for x in batch {
        if x.dim() != (len, width) {
            return Err(Error::Shape {
                op: "gru_input",
                left: x.dim(),
                right: (len, width),
            });
        }
    }
    Ok((0..len)
        .map(|t| {
            let m = Array2::from_shape_fn((batch.len(), width), |(b, k)| batch[b][[t, k]]);
            g.constant(m)
        })
        .collect())
}
