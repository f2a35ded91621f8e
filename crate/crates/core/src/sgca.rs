//! State-grounded cross-attention: state tokens query each candidate's
//! imagination group with cosine-similarity attention.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph, Var};
use crate::brains::ImaginationEmbedding;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

static ZERO_NORM_LOGGED: AtomicBool = AtomicBool::new(false);

fn note_zero_norm_rows(m: &Matrix, what: &str) {
    let has_zero = (0..m.rows()).any(|r| m.row(r).iter().all(|&x| x == 0.0));
    if has_zero && !ZERO_NORM_LOGGED.swap(true, Ordering::Relaxed) {
        log::warn!("zero-norm {what} row in cosine attention; its cosines are taken as 0");
    }
}

/// One attention matrix: `queries × keys` for a single candidate group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer_index: usize,
    pub candidate_index: usize,
    pub step: usize,
    pub episode_id: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major weights.
    pub data: Vec<f64>,
}

impl AttentionRecord {
    pub fn matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.clone())
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.rows)
            .map(|r| (self.data[r * self.cols..(r + 1) * self.cols].iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Plain-matrix reference: `softmax_q(cos(qs[p], ki[q]) / tau)`.
pub fn cosine_attention(qs: &Matrix, ki: &Matrix, tau: f64) -> Result<Matrix> {
    if qs.cols() != ki.cols() {
        return Err(Error::Shape(format!("query width {} vs key width {}", qs.cols(), ki.cols())));
    }
    if ki.rows() == 0 || qs.rows() == 0 {
        return Err(Error::Empty("attention operands"));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if !qs.is_finite() || !ki.is_finite() {
        return Err(Error::NonFinite("cosine attention input".into()));
    }
    note_zero_norm_rows(qs, "query");
    note_zero_norm_rows(ki, "key");
    let unit = |m: &Matrix| {
        let mut out = m.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        out
    };
    let cos = unit(qs).matmul_t(&unit(ki)).scale(1.0 / tau);
    Ok(softmax_rows(&cos, None))
}

#[derive(Clone, Debug)]
pub struct SgcaLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl SgcaLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: store.add_normal(format!("{name}.wq"), d, d, rng),
            wk: store.add_normal(format!("{name}.wk"), d, d, rng),
            wv: store.add_normal(format!("{name}.wv"), d, d, rng),
        }
    }

    /// `refined = softmax(cos(state·Wq, kv·Wk) / tau) · (kv·Wv)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, state: Var, kv: Var, tau: f64) -> (Var, Var) {
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let q = g.matmul(state, wq);
        let k = g.matmul(kv, wk);
        let v = g.matmul(kv, wv);
        note_zero_norm_rows(g.value(q), "query");
        note_zero_norm_rows(g.value(k), "key");
        let qn = g.normalize_rows(q);
        let kn = g.normalize_rows(k);
        let s = g.matmul_t(qn, kn);
        let s = g.scale(s, 1.0 / tau);
        let a = g.softmax(s, None);
        (g.matmul(a, v), a)
    }
}

#[derive(Clone, Debug)]
pub struct SgcaOutput {
    /// `N × d`, one pooled vector per candidate.
    pub v_atd: Var,
    pub records: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct Sgca {
    pub layers: Vec<SgcaLayer>,
    pub temperature: f64,
    /// When set, replaces the state tokens as the query stream.
    pub constant_queries: Option<ParamId>,
}

impl Sgca {
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        n_layers: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(1..=4).contains(&n_layers) {
            return Err(Error::Config(format!("sgca_layers must be in 1..=4, got {n_layers}")));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("sgca temperature must be positive, got {temperature}")));
        }
        let layers = (0..n_layers).map(|i| SgcaLayer::new(store, &format!("sgca.{i}"), d, rng)).collect();
        Ok(Self { layers, temperature, constant_queries: None })
    }

    pub fn with_constant_queries(mut self, store: &mut ParamStore, n_q: usize, d: usize, rng: &mut impl Rng) -> Self {
        self.constant_queries = Some(store.add_normal_std("sgca.constant_queries", n_q, d, 1.0, rng));
        self
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Runs the layer stack independently on every candidate group and
    /// mean-pools the final refined tokens. `state_tokens` is ignored when the
    /// stack has constant queries. Records carry step 0 and an empty
    /// episode id; callers fill those in.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state_tokens: Option<Var>,
        imag: &ImaginationEmbedding,
    ) -> Result<SgcaOutput> {
        let state = match (self.constant_queries, state_tokens) {
            (Some(id), _) => g.param(store, id),
            (None, Some(s)) => s,
            (None, None) => return Err(Error::Empty("state tokens")),
        };
        if !g.value(state).is_finite() {
            return Err(Error::NonFinite("state tokens".into()));
        }
        if !g.value(imag.groups).is_finite() {
            return Err(Error::NonFinite("imagination tokens".into()));
        }
        let (rows, d) = g.value(imag.groups).shape();
        if rows != imag.n_groups * imag.tokens_per_group {
            return Err(Error::Shape(format!(
                "{rows} imagination rows for {} groups of {}",
                imag.n_groups, imag.tokens_per_group
            )));
        }
        if imag.n_groups == 0 {
            return Err(Error::Empty("imagination groups"));
        }
        if g.value(state).cols() != d {
            return Err(Error::Shape(format!("state width {} vs imagination width {d}", g.value(state).cols())));
        }
        let mut pooled = Vec::with_capacity(imag.n_groups);
        let mut records = Vec::with_capacity(imag.n_groups * self.layers.len());
        for i in 0..imag.n_groups {
            let mut kv = g.slice_rows(imag.groups, i * imag.tokens_per_group, imag.tokens_per_group);
            for (l, layer) in self.layers.iter().enumerate() {
                let (refined, a) = layer.forward(g, store, state, kv, self.temperature);
                let am = g.value(a);
                records.push(AttentionRecord {
                    layer_index: l,
                    candidate_index: i,
                    step: 0,
                    episode_id: String::new(),
                    rows: am.rows(),
                    cols: am.cols(),
                    data: am.data().to_vec(),
                });
                kv = refined;
            }
            pooled.push(g.mean_rows(kv));
        }
        let v_atd = if pooled.len() == 1 { pooled[0] } else { g.concat_rows(&pooled) };
        Ok(SgcaOutput { v_atd, records })
    }
}
