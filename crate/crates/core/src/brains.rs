//! State-estimation ("left") and imagination ("right") branches.
//!
//! Both branches are small query-token encoders: a fixed set of learnable
//! query tokens cross-attends to the encoded instruction and the current
//! observations. The state branch also sees a summary of where the agent has
//! been and predicts its progress along the instruction; the imagination
//! branch runs one query group per candidate direction and predicts the
//! landmark found there.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graphworld::Observation;
use crate::nn::{sinusoidal_positions, AttentionBlock, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct InstructionEmbedding {
    /// `L × d_model`
    pub tokens: Var,
    /// `false` marks padding that must not be attended to.
    pub mask: Vec<bool>,
}

impl InstructionEmbedding {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct StateEmbedding {
    /// `m × d_model`
    pub tokens: Var,
    /// `1 × progress_slots`
    pub aux_progress_logits: Var,
}

#[derive(Clone, Debug)]
pub struct ImaginationEmbedding {
    /// One `M_kv × d_model` group per candidate, stacked: `(N·M_kv) × d_model`.
    pub groups: Var,
    pub n_groups: usize,
    pub tokens_per_group: usize,
    /// `N × landmark_vocab`
    pub aux_landmark_logits: Var,
}

#[derive(Clone, Debug)]
pub struct BrainTargets {
    pub hop_index: usize,
    pub candidate_landmarks: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Brains {
    d_model: usize,
    imagination_tokens: usize,
    vocab: usize,
    feature_dim: usize,
    summary_dim: usize,
    token_embedding: ParamId,
    instruction_block: AttentionBlock,
    obs_view: Linear,
    obs_direction: Linear,
    summary_proj: Linear,
    left_queries: ParamId,
    left_blocks: Vec<AttentionBlock>,
    left_head: Linear,
    right_queries: ParamId,
    right_direction: Linear,
    right_blocks: Vec<AttentionBlock>,
    right_head: Linear,
}

fn direction_rows(obs: &[Observation]) -> Matrix {
    Matrix::from_rows(&obs.iter().map(|o| vec![o.direction.cos(), o.direction.sin()]).collect::<Vec<_>>())
}

impl Brains {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let ff = d * cfg.ff_mult;
        let blocks = |store: &mut ParamStore, prefix: &str, rng: &mut _| {
            (0..cfg.brain_blocks)
                .map(|i| AttentionBlock::new(store, &format!("{prefix}.{i}"), d, cfg.heads, ff, rng))
                .collect::<Vec<_>>()
        };
        Self {
            d_model: d,
            imagination_tokens: cfg.imagination_tokens,
            vocab: cfg.vocab_size(),
            feature_dim: cfg.feature_dim,
            summary_dim: cfg.summary_dim(),
            token_embedding: store.add_normal_std("brains.instr.token_embedding", cfg.vocab_size(), d, 1.0, rng),
            instruction_block: AttentionBlock::new(store, "brains.instr.block", d, cfg.heads, ff, rng),
            obs_view: Linear::new(store, "brains.obs.view", cfg.feature_dim, d, true, rng),
            obs_direction: Linear::new(store, "brains.obs.direction", 2, d, false, rng),
            summary_proj: Linear::new(store, "brains.left.summary", cfg.summary_dim(), d, true, rng),
            left_queries: store.add_normal_std("brains.left.queries", cfg.state_tokens, d, 1.0, rng),
            left_blocks: blocks(store, "brains.left.block", rng),
            left_head: Linear::new(store, "brains.left.progress_head", d, cfg.progress_slots, true, rng),
            right_queries: store.add_normal_std("brains.right.queries", cfg.imagination_tokens, d, 1.0, rng),
            right_direction: Linear::new(store, "brains.right.direction", 2, d, false, rng),
            right_blocks: blocks(store, "brains.right.block", rng),
            right_head: Linear::new(store, "brains.right.landmark_head", d, cfg.landmark_vocab, true, rng),
        }
    }

    pub fn imagination_tokens(&self) -> usize {
        self.imagination_tokens
    }

    pub fn summary_dim(&self) -> usize {
        self.summary_dim
    }

    pub fn left_head(&self) -> &Linear {
        &self.left_head
    }

    /// Token embedding + sinusoidal positions + one self-attention block.
    pub fn encode_instruction(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        token_ids: &[usize],
    ) -> Result<InstructionEmbedding> {
        self.encode_instruction_masked(g, store, token_ids, &vec![true; token_ids.len()])
    }

    pub fn encode_instruction_masked(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        token_ids: &[usize],
        mask: &[bool],
    ) -> Result<InstructionEmbedding> {
        if token_ids.is_empty() {
            return Err(Error::Empty("instruction"));
        }
        if mask.len() != token_ids.len() {
            return Err(Error::Shape(format!("mask length {} vs {} tokens", mask.len(), token_ids.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Empty("unmasked instruction tokens"));
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::OutOfVocab(bad, self.vocab));
        }
        let table = g.param(store, self.token_embedding);
        let emb = g.gather(table, token_ids);
        let pos = g.constant(sinusoidal_positions(token_ids.len(), self.d_model));
        let x = g.add(emb, pos);
        let tokens = self.instruction_block.forward(g, store, x, x, Some(mask));
        Ok(InstructionEmbedding { tokens, mask: mask.to_vec() })
    }

    fn observation_tokens(&self, g: &mut Graph, store: &ParamStore, obs: &[Observation]) -> Result<Var> {
        if obs.is_empty() {
            return Err(Error::Empty("observations"));
        }
        if let Some(o) = obs.iter().find(|o| o.view.len() != self.feature_dim) {
            return Err(Error::Shape(format!("view of length {} expected {}", o.view.len(), self.feature_dim)));
        }
        let views = g.constant(Matrix::from_rows(&obs.iter().map(|o| o.view.clone()).collect::<Vec<_>>()));
        let dirs = g.constant(direction_rows(obs));
        let v = self.obs_view.forward(g, store, views);
        let a = self.obs_direction.forward(g, store, dirs);
        Ok(g.add(v, a))
    }

    fn context_mask(instr: &InstructionEmbedding, extra: usize) -> Vec<bool> {
        let mut m = instr.mask.clone();
        m.extend(std::iter::repeat_n(true, extra));
        m
    }

    /// State query tokens attend to `[instruction ‖ observations ‖ summary]`.
    pub fn left_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        instr: &InstructionEmbedding,
        obs: &[Observation],
        visited_summary: &[f64],
    ) -> Result<StateEmbedding> {
        if visited_summary.len() != self.summary_dim {
            return Err(Error::Shape(format!(
                "visited summary of length {} expected {}",
                visited_summary.len(),
                self.summary_dim
            )));
        }
        if g.value(instr.tokens).cols() != self.d_model {
            return Err(Error::Shape("instruction width".into()));
        }
        let obs_tokens = self.observation_tokens(g, store, obs)?;
        let summary = g.constant(Matrix::row_vector(visited_summary));
        let summary = self.summary_proj.forward(g, store, summary);
        let ctx = g.concat_rows(&[instr.tokens, obs_tokens, summary]);
        let mask = Self::context_mask(instr, obs.len() + 1);
        let mut q = g.param(store, self.left_queries);
        for block in &self.left_blocks {
            q = block.forward(g, store, q, ctx, Some(&mask));
        }
        let pooled = g.mean_rows(q);
        let aux_progress_logits = self.left_head.forward(g, store, pooled);
        Ok(StateEmbedding { tokens: q, aux_progress_logits })
    }

    /// One direction-conditioned query group per candidate attends to
    /// `[instruction ‖ observations]`.
    pub fn right_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        instr: &InstructionEmbedding,
        obs: &[Observation],
    ) -> Result<ImaginationEmbedding> {
        if g.value(instr.tokens).cols() != self.d_model {
            return Err(Error::Shape("instruction width".into()));
        }
        let obs_tokens = self.observation_tokens(g, store, obs)?;
        let ctx = g.concat_rows(&[instr.tokens, obs_tokens]);
        let mask = Self::context_mask(instr, obs.len());
        let n = obs.len();
        let base = g.param(store, self.right_queries);
        let m_kv = g.value(base).rows();
        let dirs = g.constant(direction_rows(obs));
        let dir_emb = self.right_direction.forward(g, store, dirs);
        let mut groups = Vec::with_capacity(n);
        for i in 0..n {
            let row = g.slice_rows(dir_emb, i, 1);
            let rep = g.repeat_rows(row, m_kv);
            groups.push(g.add(base, rep));
        }
        let mut q = if n == 1 { groups[0] } else { g.concat_rows(&groups) };
        for block in &self.right_blocks {
            q = block.forward(g, store, q, ctx, Some(&mask));
        }
        let pooled: Vec<Var> = (0..n)
            .map(|i| {
                let grp = g.slice_rows(q, i * m_kv, m_kv);
                g.mean_rows(grp)
            })
            .collect();
        let pooled = if n == 1 { pooled[0] } else { g.concat_rows(&pooled) };
        let aux_landmark_logits = self.right_head.forward(g, store, pooled);
        Ok(ImaginationEmbedding { groups: q, n_groups: n, tokens_per_group: m_kv, aux_landmark_logits })
    }
}

/// Progress cross-entropy and mean per-candidate landmark cross-entropy.
pub fn brain_losses(
    g: &mut Graph,
    state: &StateEmbedding,
    imag: &ImaginationEmbedding,
    targets: &BrainTargets,
) -> Result<(Var, Var)> {
    let slots = g.value(state.aux_progress_logits).cols();
    if targets.hop_index >= slots {
        return Err(Error::Target(format!("hop index {} >= {slots} progress classes", targets.hop_index)));
    }
    if targets.candidate_landmarks.len() != imag.n_groups {
        return Err(Error::Target(format!(
            "{} landmark targets for {} candidates",
            targets.candidate_landmarks.len(),
            imag.n_groups
        )));
    }
    let vocab = g.value(imag.aux_landmark_logits).cols();
    if let Some(&bad) = targets.candidate_landmarks.iter().find(|&&l| l >= vocab) {
        return Err(Error::Target(format!("landmark {bad} >= vocabulary {vocab}")));
    }
    let left = g.nll(state.aux_progress_logits, targets.hop_index, None);
    let mut terms = Vec::with_capacity(imag.n_groups);
    for (i, &l) in targets.candidate_landmarks.iter().enumerate() {
        let row = g.slice_rows(imag.aux_landmark_logits, i, 1);
        terms.push(g.nll(row, l, None));
    }
    let cat = g.concat_rows(&terms);
    let total = g.sum(cat);
    let right = g.scale(total, 1.0 / imag.n_groups as f64);
    Ok((left, right))
}
