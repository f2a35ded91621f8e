//! Central finite-difference checks of the tape gradients.
//!
//! Each registered component builds a small parameter store and a scalar
//! loss. Parameters that start at exactly zero (zero-initialised output
//! projections, the distance-bias weights) are re-drawn first, since a zero
//! output projection makes every upstream gradient vanish.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::brains::{brain_losses, BrainTargets, Brains, ImaginationEmbedding, InstructionEmbedding};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::graphworld::{generate_world, observations, sample_episodes, DistanceTable, EpisodeConfig, WorldConfig};
use crate::model::Model;
use crate::params::{ParamId, ParamStore};
use crate::policy::{Gasa, Injection, PolicyNet, TopoMemory};
use crate::registry::Registry;
use crate::sgca::Sgca;
use crate::tensor::Matrix;

use super::rollout::{bc_loss, EpisodeEnv};

pub type LossFn = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>;

pub struct GradCase {
    pub store: ParamStore,
    pub loss: LossFn,
}

pub trait GradComponent: Send + Sync {
    fn name(&self) -> &'static str;
    /// Largest acceptable relative error.
    fn tolerance(&self) -> f64 {
        1e-4
    }
    fn build(&self, seed: u64) -> Result<GradCase>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub component: String,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries probed per parameter tensor; all of them when the tensor is smaller.
    pub max_entries: usize,
    /// GELU and layer norm become the identity.
    pub linear_debug: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, max_entries: 24, linear_debug: false, seed: 0 }
    }
}

fn tiny_config(variant: &str) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        ff_mult: 2,
        state_tokens: 2,
        imagination_tokens: 2,
        brain_blocks: 1,
        sgca_layers: 2,
        cross_rounds: 1,
        progress_slots: 8,
        variant: variant.into(),
        ..ModelConfig::default()
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `Σ out ⊙ R` with a fixed random `R`, so every output entry matters.
fn project(g: &mut Graph, out: Var, r: &Matrix) -> Var {
    let r = g.constant(r.clone());
    let p = g.mul(out, r);
    g.sum(p)
}

fn redraw_zeros(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if store.value(id).data().iter().all(|&x| x == 0.0) {
            let (r, c) = store.value(id).shape();
            store.set_value(id, gaussian(r, c, rng).scale(0.3));
        }
    }
}

fn test_world() -> Result<crate::graphworld::NavGraph> {
    generate_world(&WorldConfig { node_count: 8, ..WorldConfig::default() }, 0, 11)
}

struct BrainsCheck;

impl GradComponent for BrainsCheck {
    fn name(&self) -> &'static str {
        "brains"
    }
    fn build(&self, seed: u64) -> Result<GradCase> {
        let cfg = tiny_config("full");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let brains = Brains::new(&mut store, &cfg, &mut rng);
        let world = test_world()?;
        let obs = observations(&world, 0, 0.0)?;
        let summary: Vec<f64> = (0..cfg.summary_dim()).map(|_| rng.random::<f64>()).collect();
        let rs = gaussian(cfg.state_tokens, cfg.d_model, &mut rng);
        let ri = gaussian(obs.len() * cfg.imagination_tokens, cfg.d_model, &mut rng);
        let targets = BrainTargets {
            hop_index: 1,
            candidate_landmarks: obs.iter().map(|o| world.landmark(o.candidate)).collect(),
        };
        let loss: LossFn = Box::new(move |g, store| {
            let instr = brains.encode_instruction(g, store, &[1, 4, 2, 5, 0])?;
            let state = brains.left_forward(g, store, &instr, &obs, &summary)?;
            let imag = brains.right_forward(g, store, &instr, &obs)?;
            let (l, r) = brain_losses(g, &state, &imag, &targets)?;
            let a = project(g, state.tokens, &rs);
            let b = project(g, imag.groups, &ri);
            let s = g.concat_rows(&[l, r, a, b]);
            Ok(g.sum(s))
        });
        Ok(GradCase { store, loss })
    }
}

struct SgcaCheck;

impl GradComponent for SgcaCheck {
    fn name(&self) -> &'static str {
        "sgca"
    }
    fn build(&self, seed: u64) -> Result<GradCase> {
        let (d, m, n, kv) = (8, 2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sgca = Sgca::new(&mut store, d, 3, 1.0 / (d as f64).sqrt(), &mut rng)?;
        let state = gaussian(m, d, &mut rng);
        let groups = gaussian(n * kv, d, &mut rng);
        let r = gaussian(n, d, &mut rng);
        let loss: LossFn = Box::new(move |g, store| {
            let s = g.constant(state.clone());
            let groups = g.constant(groups.clone());
            let aux = g.constant(Matrix::zeros(n, 1));
            let imag = ImaginationEmbedding { groups, n_groups: n, tokens_per_group: kv, aux_landmark_logits: aux };
            let out = sgca.forward(g, store, Some(s), &imag)?;
            Ok(project(g, out.v_atd, &r))
        });
        Ok(GradCase { store, loss })
    }
}

struct InjectionCheck;

impl GradComponent for InjectionCheck {
    fn name(&self) -> &'static str {
        "injection"
    }
    fn build(&self, seed: u64) -> Result<GradCase> {
        let (d, n) = (8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let inj = Injection::new(&mut store, d, 2, &mut rng);
        redraw_zeros(&mut store, &mut rng);
        let vis = gaussian(n, d, &mut rng);
        let atd: Vec<Option<Matrix>> = (0..n).map(|i| (i != 1).then(|| gaussian(1, d, &mut rng))).collect();
        let r = gaussian(n, d, &mut rng);
        let loss: LossFn = Box::new(move |g, store| {
            let v = g.constant(vis.clone());
            let a: Vec<Option<Var>> = atd.iter().map(|m| m.as_ref().map(|m| g.constant(m.clone()))).collect();
            let out = inj.forward(g, store, v, &a)?;
            Ok(project(g, out, &r))
        });
        Ok(GradCase { store, loss })
    }
}

struct GasaCheck;

impl GradComponent for GasaCheck {
    fn name(&self) -> &'static str {
        "gasa"
    }
    fn build(&self, seed: u64) -> Result<GradCase> {
        let (d, n) = (8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gasa = Gasa::new(&mut store, "gasa", d, 2, &mut rng);
        redraw_zeros(&mut store, &mut rng);
        let x = gaussian(n, d, &mut rng);
        let mut e = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let v = rng.random_range(0.5..4.0);
                e.set(i, j, v);
                e.set(j, i, v);
            }
        }
        let r = gaussian(n, d, &mut rng);
        let loss: LossFn = Box::new(move |g, store| {
            let x = g.constant(x.clone());
            let out = gasa.forward(g, store, x, &e)?;
            Ok(project(g, out, &r))
        });
        Ok(GradCase { store, loss })
    }
}

/// The full policy network on a small memory, scored by the action NLL.
struct HeadCheck;

impl GradComponent for HeadCheck {
    fn name(&self) -> &'static str {
        "head"
    }
    fn build(&self, seed: u64) -> Result<GradCase> {
        let cfg = tiny_config("full");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let policy = PolicyNet::new(&mut store, &cfg, true, &mut rng);
        redraw_zeros(&mut store, &mut rng);
        let world = test_world()?;
        let instr = gaussian(4, cfg.d_model, &mut rng);
        let atd = gaussian(world.node_count(), cfg.d_model, &mut rng);
        let loss: LossFn = Box::new(move |g, store| {
            let tokens = g.constant(instr.clone());
            let instr = InstructionEmbedding { tokens, mask: vec![true; 4] };
            let mut mem: TopoMemory<Var> = TopoMemory::new();
            let mut target = None;
            for (t, v) in [0usize].into_iter().enumerate() {
                let obs = observations(&world, v, 0.0)?;
                let slots = obs.iter().map(|o| Some(g.constant(atd.slice_rows(o.candidate, 1)))).collect();
                target = obs.first().map(|o| crate::policy::Action::Node(o.candidate));
                mem.update(v, world.view_feature(v), &obs, slots, t)?;
            }
            let out = policy.predict_action(g, store, &mem, &instr)?;
            out.nll(g, target.unwrap_or(crate::policy::Action::Stop))
        });
        Ok(GradCase { store, loss })
    }
}

/// Teacher-forced loss of a full model over a one-hop episode (two decisions).
struct EndToEndCheck;

impl GradComponent for EndToEndCheck {
    fn name(&self) -> &'static str {
        "end_to_end"
    }
    fn tolerance(&self) -> f64 {
        1e-3
    }
    fn build(&self, seed: u64) -> Result<GradCase> {
        let (model, mut store) = Model::new(&tiny_config("full"), seed)?;
        redraw_zeros(&mut store, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let world = test_world()?;
        let table = DistanceTable::new(&world);
        let ecfg = EpisodeConfig { min_hops: 1, max_hops: 1, success_radius: 3.0 };
        let episode = sample_episodes(&world, &ecfg, 1, seed)?.remove(0);
        let loss: LossFn = Box::new(move |g, store| {
            let env = EpisodeEnv { world: &world, table: &table, episode: &episode };
            let instr = model.encode(g, store, &episode.instruction)?;
            bc_loss(&model, g, store, &instr, env)
        });
        Ok(GradCase { store, loss })
    }
}

pub fn grad_components() -> &'static Registry<dyn GradComponent> {
    static REGISTRY: OnceLock<Registry<dyn GradComponent>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn GradComponent> = Registry::new("grad-check component");
        r.register("brains", Box::new(BrainsCheck))
            .register("sgca", Box::new(SgcaCheck))
            .register("injection", Box::new(InjectionCheck))
            .register("gasa", Box::new(GasaCheck))
            .register("head", Box::new(HeadCheck))
            .register("end_to_end", Box::new(EndToEndCheck));
        r
    })
}

fn eval_loss(case: &GradCase, store: &ParamStore, linear_debug: bool) -> Result<f64> {
    let mut g = Graph::new();
    g.set_linear_debug(linear_debug);
    let l = (case.loss)(&mut g, store)?;
    Ok(g.value(l).item())
}

/// Evenly spaced entry indices, at most `k` of them.
fn probe_indices(len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    (0..k).map(|i| i * len / k).collect()
}

/// Normwise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` per parameter tensor
/// over the probed entries; zero when both gradients vanish.
pub fn check_case(name: &str, tolerance: f64, case: &GradCase, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    g.set_linear_debug(opts.linear_debug);
    let loss = (case.loss)(&mut g, &case.store)?;
    let analytic: std::collections::BTreeMap<ParamId, Matrix> = g.backward(loss).param_grads(&g).into_iter().collect();
    let mut store = case.store.clone();
    let mut params = Vec::new();
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = case.store.ids().collect();
    for id in ids {
        let len = store.value(id).len();
        let idx = probe_indices(len, opts.max_entries);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &k in &idx {
            let orig = store.value(id).data()[k];
            store.value_mut_raw(id).data_mut()[k] = orig + opts.step;
            let plus = eval_loss(case, &store, opts.linear_debug)?;
            store.value_mut_raw(id).data_mut()[k] = orig - opts.step;
            let minus = eval_loss(case, &store, opts.linear_debug)?;
            store.value_mut_raw(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(&id).map_or(0.0, |m| m.data()[k]);
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let denom = na.sqrt().max(nn.sqrt());
        let rel = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        worst = worst.max(rel);
        params.push(ParamCheck { name: store.name(id).to_string(), checked: idx.len(), rel_error: rel });
    }
    Ok(GradCheckReport { component: name.to_string(), tolerance, max_rel_error: worst, params })
}

pub fn run_grad_check(component: &str, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let c = grad_components().get(component)?;
    let case = c.build(opts.seed)?;
    check_case(c.name(), c.tolerance(), &case, opts)
}
