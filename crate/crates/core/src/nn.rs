//! Layers built on the autodiff tape: linear maps, layer norm, multi-head
//! attention and the post-norm transformer blocks used by the encoders.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), d_in, d_out, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), 1, d_out));
        Self { weight, bias }
    }

    /// Linear map whose weight starts at exactly zero.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = store.add_zeros(format!("{name}.weight"), d_in, d_out);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), 1, d_out));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self { gain: store.add_ones(format!("{name}.gain"), 1, d), bias: store.add_zeros(format!("{name}.bias"), 1, d) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        if g.linear_debug() {
            return x;
        }
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Standard scaled dot-product multi-head attention with an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub output: Var,
    /// One `n_q × n_k` weight matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(d.is_multiple_of(heads), "model width must be divisible by head count");
        Self {
            wq: store.add_normal(format!("{name}.wq"), d, d, rng),
            wk: store.add_normal(format!("{name}.wk"), d, d, rng),
            wv: store.add_normal(format!("{name}.wv"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng),
            heads,
        }
    }

    /// Same as [`MultiHeadAttention::new`] but with a zero output projection,
    /// so the block contributes nothing until trained.
    pub fn new_zero_out(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(d.is_multiple_of(heads), "model width must be divisible by head count");
        Self {
            wq: store.add_normal(format!("{name}.wq"), d, d, rng),
            wk: store.add_normal(format!("{name}.wk"), d, d, rng),
            wv: store.add_normal(format!("{name}.wv"), d, d, rng),
            out: Linear::zeros(store, &format!("{name}.out"), d, d, false),
            heads,
        }
    }

    /// `key_mask[j] == false` removes key `j` for every query.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        key_mask: Option<&[bool]>,
    ) -> AttentionOutput {
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let q = g.matmul(queries, wq);
        let k = g.matmul(keys, wk);
        let v = g.matmul(keys, wv);
        let d = g.value(q).cols();
        let nq = g.value(q).rows();
        let dh = d / self.heads;
        let mask = key_mask.map(|m| {
            let mut full = Vec::with_capacity(nq * m.len());
            for _ in 0..nq {
                full.extend_from_slice(m);
            }
            Rc::new(full)
        });
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let a = g.softmax(s, mask.clone());
            weights.push(a);
            outs.push(g.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let output = self.out.forward(g, store, cat);
        AttentionOutput { output, weights }
    }
}

/// Post-norm block: `x = LN(x + Attn(x, ctx)); x = LN(x + FFN(x))`.
/// With `ctx == x` this is a self-attention encoder block.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ff, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: Var, ctx_mask: Option<&[bool]>) -> Var {
        let a = self.attn.forward(g, store, x, ctx, ctx_mask).output;
        let x = g.add(x, a);
        let x = self.norm1.forward(g, store, x);
        let f = self.ffn.forward(g, store, x);
        let x = g.add(x, f);
        self.norm2.forward(g, store, x)
    }
}

/// Sinusoidal position table of shape `len × d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Matrix {
    Matrix::from_fn(len, d, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
