//! Single transformer encoder block with a per-step regression head.
//!
//! ```text
//! e  = x W_e + b_e (+ positional code)
//! a  = dropout(MHA(e))
//! n1 = norm(e + a)
//! f  = dropout(relu(n1 W_1 + b_1) W_2 + b_2)
//! n2 = norm(n1 + f)
//! y  = n2 W_o + b_o
//! ```

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use crate::autograd::{Graph, RngStream, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Every step attends to every other step.
    #[default]
    None,
    /// Step `t` attends to steps `..= t` only.
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    #[default]
    None,
    Sinusoidal,
}

/// `softmax(Q K^T / sqrt(d_k) [+ causal mask]) V`.
pub fn scaled_dot_product_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: MaskMode) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q), g.shape(k), g.shape(v));
    if qs.1 != ks.1 {
        return Err(Error::Shape {
            op: "attention(q, k)",
            left: qs,
            right: ks,
        });
    }
    if ks.0 != vs.0 {
        return Err(Error::Shape {
            op: "attention(k, v)",
            left: ks,
            right: vs,
        });
    }
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt)?;
    let scaled = g.scale(logits, 1.0 / (qs.1 as f64).sqrt());
    let weights = g.softmax_rows(scaled, mask == MaskMode::Causal);
    g.matmul(weights, v)
}

/// Standard sine/cosine table of shape `(len, width)`.
pub fn sinusoidal_table(len: usize, width: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, width), |(t, i)| {
        let pair = (i / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * pair / width as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlockNet {
    pub input_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub mask: MaskMode,
    pub positional: PositionalEncoding,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerShape {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub mask: MaskMode,
    pub positional: PositionalEncoding,
}

impl TransformerBlockNet {
    pub fn init(store: &mut ParamStore, input_dim: usize, shape: TransformerShape, rng: &mut RngStream) -> Result<Self> {
        let TransformerShape {
            d_model,
            heads,
            d_ff,
            dropout,
            mask,
            positional,
        } = shape;
        if heads == 0 || d_model == 0 || d_model % heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {d_model} must be a positive multiple of heads {heads}"
            )));
        }
        if d_ff == 0 {
            return Err(Error::invalid("d_ff must be positive"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout {dropout} outside [0, 1)")));
        }
        let embed_w = store.add_weight("embed.w", input_dim, d_model, rng);
        let embed_b = store.add_zeros("embed.b", 1, d_model);
        let q_w = store.add_weight("attn.q.w", d_model, d_model, rng);
        let q_b = store.add_zeros("attn.q.b", 1, d_model);
        let k_w = store.add_weight("attn.k.w", d_model, d_model, rng);
        let k_b = store.add_zeros("attn.k.b", 1, d_model);
        let v_w = store.add_weight("attn.v.w", d_model, d_model, rng);
        let v_b = store.add_zeros("attn.v.b", 1, d_model);
        let o_w = store.add_weight("attn.o.w", d_model, d_model, rng);
        let o_b = store.add_zeros("attn.o.b", 1, d_model);
        let norm1_gain = store.add_ones("norm1.gain", 1, d_model);
        let norm1_bias = store.add_zeros("norm1.bias", 1, d_model);
        let ff1_w = store.add_weight("ff1.w", d_model, d_ff, rng);
        let ff1_b = store.add_zeros("ff1.b", 1, d_ff);
        let ff2_w = store.add_weight("ff2.w", d_ff, d_model, rng);
        let ff2_b = store.add_zeros("ff2.b", 1, d_model);
        let norm2_gain = store.add_ones("norm2.gain", 1, d_model);
        let norm2_bias = store.add_zeros("norm2.bias", 1, d_model);
        let head_w = store.add_weight("head.w", d_model, 1, rng);
        let head_b = store.add_zeros("head.b", 1, 1);
        Ok(Self {
            input_dim,
            d_model,
            heads,
            d_ff,
            dropout,
            mask,
            positional,
            embed_w,
            embed_b,
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            o_w,
            o_b,
            norm1_gain,
            norm1_bias,
            ff1_w,
            ff1_b,
            ff2_w,
            ff2_b,
            norm2_gain,
            norm2_bias,
            head_w,
            head_b,
        })
    }

    pub fn param_count(input_dim: usize, d_model: usize, d_ff: usize) -> usize {
        let d = d_model;
        (input_dim * d + d) + 4 * (d * d + d) + 4 * d + (d * d_ff + d_ff) + (d_ff * d + d) + (d + 1)
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    fn linear(g: &mut Graph, p: &Bound, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let y = g.matmul(x, p[w])?;
        g.add_row(y, p[b])
    }

    fn norm(g: &mut Graph, p: &Bound, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let n = g.layer_norm(x, LAYER_NORM_EPS);
        let n = g.mul_row(n, p[gain])?;
        g.add_row(n, p[bias])
    }

    fn multi_head(&self, g: &mut Graph, p: &Bound, e: Var) -> Result<Var> {
        let q = Self::linear(g, p, e, self.q_w, self.q_b)?;
        let k = Self::linear(g, p, e, self.k_w, self.k_b)?;
        let v = Self::linear(g, p, e, self.v_w, self.v_b)?;
        let dk = self.d_k();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            heads.push(scaled_dot_product_attention(g, qh, kh, vh, self.mask)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        Self::linear(g, p, joined, self.o_w, self.o_b)
    }

    /// Predictions `(steps, 1)` for one `(steps, input_dim)` sequence.
    pub fn forward_one(&self, g: &mut Graph, p: &Bound, x: Var, training: bool, rng: &mut RngStream) -> Result<Var> {
        let (len, width) = g.shape(x);
        if width != self.input_dim || len == 0 {
            return Err(Error::Shape {
                op: "transformer_forward",
                left: (len, width),
                right: (len.max(1), self.input_dim),
            });
        }
        let mut e = Self::linear(g, p, x, self.embed_w, self.embed_b)?;
        if self.positional == PositionalEncoding::Sinusoidal {
            let pe = g.constant(sinusoidal_table(len, self.d_model));
            e = g.add(e, pe)?;
        }
        let attn = self.multi_head(g, p, e)?;
        let attn = g.dropout(attn, self.dropout, rng, training)?;
        let res1 = g.add(e, attn)?;
        let n1 = Self::norm(g, p, res1, self.norm1_gain, self.norm1_bias)?;
        let f = Self::linear(g, p, n1, self.ff1_w, self.ff1_b)?;
        let f = g.relu(f);
        let f = Self::linear(g, p, f, self.ff2_w, self.ff2_b)?;
        let f = g.dropout(f, self.dropout, rng, training)?;
        let res2 = g.add(n1, f)?;
        let n2 = Self::norm(g, p, res2, self.norm2_gain, self.norm2_bias)?;
        Self::linear(g, p, n2, self.head_w, self.head_b)
    }

    /// Predictions `(batch, steps)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &[&Array2<f64>], training: bool, rng: &mut RngStream) -> Result<Var> {
        let mut rows = Vec::with_capacity(batch.len());
        for x in batch {
            let xv = g.constant((*x).clone());
            let y = self.forward_one(g, p, xv, training, rng)?;
            rows.push(g.transpose(y));
        }
        if rows.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        g.concat_rows(&rows)
    }
}
