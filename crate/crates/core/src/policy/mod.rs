//! Graph navigation policy over the agent's topological memory.
//!
//! Sequence layout is `[STOP ‖ memory nodes in insertion order]`. Each node
//! embedding is the projected mean of its views plus a status embedding,
//! optionally fused with its grounded imagination vector. `cross_rounds`
//! rounds of instruction cross-attention and distance-biased self-attention
//! follow, then a two-layer head scores every admissible entry.

mod memory;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph, Var};
use crate::brains::InstructionEmbedding;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graphworld::NodeId;
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

pub use memory::{MemoryNode, NodeStatus, TopoMemory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Stop,
    Node(NodeId),
}

/// Scores and probabilities over the admissible actions only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub actions: Vec<Action>,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn prob(&self, a: Action) -> f64 {
        self.actions.iter().position(|&x| x == a).map_or(0.0, |i| self.probs[i])
    }

    /// Highest probability; ties go to the earliest action.
    pub fn argmax(&self) -> Action {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        self.actions[best]
    }

    /// Inverse-CDF draw with a uniform sample `u ∈ [0, 1)`.
    pub fn sample_with(&self, u: f64) -> Action {
        let mut acc = 0.0;
        for (a, &p) in self.actions.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return *a;
            }
        }
        *self.actions.last().expect("non-empty distribution")
    }
}

#[derive(Clone, Debug)]
pub struct PolicyOutput {
    /// `1 × (1 + memory size)`
    pub logits: Var,
    pub mask: Rc<Vec<bool>>,
    pub sequence: Vec<Action>,
    pub distribution: ActionDistribution,
}

impl PolicyOutput {
    /// `-log π(target)`; errors when the target is not admissible.
    pub fn nll(&self, g: &mut Graph, target: Action) -> Result<Var> {
        let idx = self
            .sequence
            .iter()
            .position(|&a| a == target)
            .filter(|&i| self.mask[i])
            .ok_or_else(|| Error::Target(format!("{target:?} is not in the action support")))?;
        Ok(g.nll(self.logits, idx, Some(self.mask.clone())))
    }
}

/// Residual cross-attention with `v_vis` as query and the present `v_atd`
/// vectors as keys and values. The output projection starts at zero.
#[derive(Clone, Debug)]
pub struct Injection {
    pub attn: MultiHeadAttention,
}

impl Injection {
    pub fn new(store: &mut ParamStore, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self { attn: MultiHeadAttention::new_zero_out(store, "policy.injection", d, heads, rng) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, v_vis: Var, v_atd: &[Option<Var>]) -> Result<Var> {
        let (n, d) = g.value(v_vis).shape();
        if v_atd.len() != n {
            return Err(Error::Shape(format!("{} imagination slots for {n} nodes", v_atd.len())));
        }
        let present: Vec<Var> = v_atd.iter().flatten().copied().collect();
        if present.is_empty() {
            return Ok(v_vis);
        }
        let keys = if present.len() == 1 { present[0] } else { g.concat_rows(&present) };
        let out = self.attn.forward(g, store, v_vis, keys, None).output;
        let keep = Matrix::from_fn(n, d, |r, _| if v_atd[r].is_some() { 1.0 } else { 0.0 });
        let keep = g.constant(keep);
        let out = g.mul(out, keep);
        Ok(g.add(v_vis, out))
    }
}

/// Self-attention whose logits carry a learned per-head multiple of the
/// clipped pairwise distance. No output projection.
#[derive(Clone, Debug)]
pub struct Gasa {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// `1 × heads`
    pub w_e: ParamId,
    pub norm: LayerNorm,
    pub heads: usize,
}

pub fn check_distance_matrix(e: &Matrix) -> Result<()> {
    if e.rows() != e.cols() {
        return Err(Error::Shape(format!("distance matrix is {}×{}", e.rows(), e.cols())));
    }
    for i in 0..e.rows() {
        if e.get(i, i) != 0.0 {
            return Err(Error::Shape(format!("distance matrix diagonal entry {i} is nonzero")));
        }
        for j in 0..i {
            if e.get(i, j) != e.get(j, i) {
                return Err(Error::Shape(format!("distance matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

impl Gasa {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: store.add_normal(format!("{name}.wq"), d, d, rng),
            wk: store.add_normal(format!("{name}.wk"), d, d, rng),
            wv: store.add_normal(format!("{name}.wv"), d, d, rng),
            w_e: store.add_zeros(format!("{name}.w_e"), 1, heads),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, e: &Matrix) -> Result<Var> {
        check_distance_matrix(e)?;
        let (n, d) = g.value(x).shape();
        if e.rows() != n {
            return Err(Error::Shape(format!("distance matrix of size {} for {n} nodes", e.rows())));
        }
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let w_e = g.param(store, self.w_e);
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let ec = g.constant(e.clone());
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let we_h = if self.heads == 1 { w_e } else { g.slice_cols(w_e, h, 1) };
            let bias = g.scale_by(ec, we_h);
            let s = g.add(s, bias);
            let a = g.softmax(s, None);
            outs.push(g.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let y = g.add(x, cat);
        Ok(self.norm.forward(g, store, y))
    }
}

#[derive(Clone, Debug)]
struct PolicyRound {
    cross: MultiHeadAttention,
    cross_norm: LayerNorm,
    gasa: Gasa,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct PolicyNet {
    d_model: usize,
    feature_dim: usize,
    distance_clip: f64,
    score_visited: bool,
    vis_proj: Linear,
    status_embedding: ParamId,
    stop_embedding: ParamId,
    pub injection: Option<Injection>,
    rounds: Vec<PolicyRound>,
    head_hidden: Linear,
    head_out: ParamId,
}

impl PolicyNet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, with_injection: bool, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let rounds = (0..cfg.cross_rounds)
            .map(|i| {
                let name = format!("policy.round.{i}");
                PolicyRound {
                    cross: MultiHeadAttention::new(store, &format!("{name}.cross"), d, cfg.heads, rng),
                    cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d),
                    gasa: Gasa::new(store, &format!("{name}.gasa"), d, cfg.heads, rng),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d * cfg.ff_mult, rng),
                    ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
                }
            })
            .collect();
        let vis_proj = Linear::new(store, "policy.vis_proj", cfg.feature_dim, d, true, rng);
        let status_embedding = store.add_normal_std("policy.status_embedding", 3, d, 1.0, rng);
        let stop_embedding = store.add_normal_std("policy.stop_embedding", 1, d, 1.0, rng);
        let head_hidden = Linear::new(store, "policy.head.hidden", d, d, true, rng);
        let head_out = store.add_normal("policy.head.out", 1, d, rng);
        // drawn last so that models with and without injection agree elsewhere
        let injection = with_injection.then(|| Injection::new(store, d, cfg.heads, rng));
        Self {
            d_model: d,
            feature_dim: cfg.feature_dim,
            distance_clip: cfg.distance_clip,
            score_visited: cfg.score_visited,
            vis_proj,
            status_embedding,
            stop_embedding,
            injection,
            rounds,
            head_hidden,
            head_out,
        }
    }

    pub fn score_visited(&self) -> bool {
        self.score_visited
    }

    pub fn gasa_layers(&self) -> impl Iterator<Item = &Gasa> {
        self.rounds.iter().map(|r| &r.gasa)
    }

    /// Projection of the arithmetic mean of `views`.
    pub fn node_visual_embedding(&self, g: &mut Graph, store: &ParamStore, views: &[Vec<f64>]) -> Result<Var> {
        let mean = self.mean_views(std::slice::from_ref(&views.to_vec()))?;
        let x = g.constant(mean);
        Ok(self.vis_proj.forward(g, store, x))
    }

    fn mean_views(&self, per_node: &[Vec<Vec<f64>>]) -> Result<Matrix> {
        let mut m = Matrix::zeros(per_node.len(), self.feature_dim);
        for (r, views) in per_node.iter().enumerate() {
            if views.is_empty() {
                return Err(Error::Empty("node views"));
            }
            for v in views {
                if v.len() != self.feature_dim {
                    return Err(Error::Shape(format!("view of length {} expected {}", v.len(), self.feature_dim)));
                }
                for (o, x) in m.row_mut(r).iter_mut().zip(v) {
                    *o += x;
                }
            }
            let n = views.len() as f64;
            m.row_mut(r).iter_mut().for_each(|o| *o /= n);
        }
        Ok(m)
    }

    /// `[STOP ‖ nodes]` distances in meters, clipped; STOP sits at 0 from everything.
    pub fn sequence_distances(&self, mem: &TopoMemory<Var>) -> Matrix {
        let n = mem.len();
        let dist = mem.distance_matrix();
        Matrix::from_fn(
            n + 1,
            n + 1,
            |i, j| {
                if i == 0 || j == 0 {
                    0.0
                } else {
                    dist[i - 1][j - 1].min(self.distance_clip)
                }
            },
        )
    }

    pub fn predict_action(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mem: &TopoMemory<Var>,
        instr: &InstructionEmbedding,
    ) -> Result<PolicyOutput> {
        if mem.current().is_none() {
            return Err(Error::Empty("topological memory"));
        }
        let nodes = mem.nodes();
        let views: Vec<Vec<Vec<f64>>> = nodes.iter().map(|n| n.views.clone()).collect();
        let means = g.constant(self.mean_views(&views)?);
        let vis = self.vis_proj.forward(g, store, means);
        let table = g.param(store, self.status_embedding);
        let status = g.gather(table, &nodes.iter().map(|n| n.status.index()).collect::<Vec<_>>());
        let v_vis = g.add(vis, status);
        let v_nodes = match &self.injection {
            Some(inj) => {
                let atd: Vec<Option<Var>> = nodes.iter().map(|n| n.v_atd).collect();
                inj.forward(g, store, v_vis, &atd)?
            }
            None => v_vis,
        };
        let stop = g.param(store, self.stop_embedding);
        let mut x = g.concat_rows(&[stop, v_nodes]);
        let e = self.sequence_distances(mem);
        for round in &self.rounds {
            let a = round.cross.forward(g, store, x, instr.tokens, Some(&instr.mask)).output;
            let y = g.add(x, a);
            x = round.cross_norm.forward(g, store, y);
            x = round.gasa.forward(g, store, x, &e)?;
            let f = round.ffn.forward(g, store, x);
            let y = g.add(x, f);
            x = round.ffn_norm.forward(g, store, y);
        }
        let h = self.head_hidden.forward(g, store, x);
        let h = g.gelu(h);
        let w = g.param(store, self.head_out);
        let logits = g.matmul_t(w, h);

        let mut sequence = Vec::with_capacity(nodes.len() + 1);
        sequence.push(Action::Stop);
        sequence.extend(nodes.iter().map(|n| Action::Node(n.id)));
        let mut mask = vec![true];
        mask.extend(nodes.iter().map(|n| match n.status {
            NodeStatus::Frontier => true,
            NodeStatus::Visited => self.score_visited,
            NodeStatus::Current => false,
        }));
        let lv = g.value(logits);
        if !lv.is_finite() {
            return Err(Error::NonFinite("action logits".into()));
        }
        let probs = softmax_rows(lv, Some(&mask));
        let mut distribution = ActionDistribution { actions: Vec::new(), scores: Vec::new(), probs: Vec::new() };
        for (i, &a) in sequence.iter().enumerate() {
            if mask[i] {
                distribution.actions.push(a);
                distribution.scores.push(lv.data()[i]);
                distribution.probs.push(probs.data()[i]);
            }
        }
        debug_assert_eq!(self.d_model, g.value(x).cols());
        Ok(PolicyOutput { logits, mask: Rc::new(mask), sequence, distribution })
    }
}
