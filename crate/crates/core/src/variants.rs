//! Model variants used for the ablation grid.
//!
//! A variant decides whether the grounding path (SGCA + injection) exists and
//! what feeds it. Variants are looked up by name at runtime.

use std::sync::OnceLock;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::brains::{Brains, ImaginationEmbedding, InstructionEmbedding};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graphworld::Observation;
use crate::params::ParamStore;
use crate::registry::Registry;
use crate::sgca::{Sgca, SgcaOutput};
use crate::tensor::Matrix;

pub trait Variant: Send + Sync {
    fn name(&self) -> &'static str;

    fn summary(&self) -> &'static str;

    /// Builds the SGCA stack, or `None` when the variant has no grounding
    /// path (and therefore no injection either).
    fn build(&self, store: &mut ParamStore, cfg: &ModelConfig, rng: &mut dyn rand::RngCore) -> Result<Option<Sgca>>;

    /// Whether the state branch output is consumed.
    fn needs_state(&self) -> bool {
        true
    }

    /// Grounded per-candidate vectors for the current observations.
    #[allow(clippy::too_many_arguments)]
    fn ground(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        brains: &Brains,
        sgca: &Sgca,
        instr: &InstructionEmbedding,
        obs: &[Observation],
        state_tokens: Option<Var>,
    ) -> Result<SgcaOutput>;
}

fn standard_sgca(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Sgca> {
    Sgca::new(store, cfg.d_model, cfg.sgca_layers, cfg.temperature(), rng)
}

fn require_state(state: Option<Var>) -> Result<Var> {
    state.ok_or_else(|| Error::Config("state tokens required by this variant".into()))
}

struct Full;

impl Variant for Full {
    fn name(&self) -> &'static str {
        "full"
    }
    fn summary(&self) -> &'static str {
        "state tokens ground the imagination groups; result injected into the policy"
    }
    fn build(
        &self,
        store: &mut ParamStore,
        cfg: &ModelConfig,
        mut rng: &mut dyn rand::RngCore,
    ) -> Result<Option<Sgca>> {
        standard_sgca(store, cfg, &mut rng).map(Some)
    }
    fn ground(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        brains: &Brains,
        sgca: &Sgca,
        instr: &InstructionEmbedding,
        obs: &[Observation],
        state_tokens: Option<Var>,
    ) -> Result<SgcaOutput> {
        let imag = brains.right_forward(g, store, instr, obs)?;
        sgca.forward(g, store, Some(require_state(state_tokens)?), &imag)
    }
}

struct SeOnly;

impl Variant for SeOnly {
    fn name(&self) -> &'static str {
        "se_only"
    }
    fn summary(&self) -> &'static str {
        "imagination groups replaced by zeros"
    }
    fn build(
        &self,
        store: &mut ParamStore,
        cfg: &ModelConfig,
        mut rng: &mut dyn rand::RngCore,
    ) -> Result<Option<Sgca>> {
        standard_sgca(store, cfg, &mut rng).map(Some)
    }
    fn ground(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        brains: &Brains,
        sgca: &Sgca,
        _instr: &InstructionEmbedding,
        obs: &[Observation],
        state_tokens: Option<Var>,
    ) -> Result<SgcaOutput> {
        let state = require_state(state_tokens)?;
        let d = g.value(state).cols();
        let m = brains.imagination_tokens();
        let groups = g.constant(Matrix::zeros(obs.len() * m, d));
        let aux = g.constant(Matrix::zeros(obs.len(), 1));
        let imag = ImaginationEmbedding { groups, n_groups: obs.len(), tokens_per_group: m, aux_landmark_logits: aux };
        sgca.forward(g, store, Some(state), &imag)
    }
}

struct ImOnly;

impl Variant for ImOnly {
    fn name(&self) -> &'static str {
        "im_only"
    }
    fn summary(&self) -> &'static str {
        "SGCA queries are learned constants instead of state tokens"
    }
    fn build(
        &self,
        store: &mut ParamStore,
        cfg: &ModelConfig,
        mut rng: &mut dyn rand::RngCore,
    ) -> Result<Option<Sgca>> {
        let sgca = standard_sgca(store, cfg, &mut rng)?;
        Ok(Some(sgca.with_constant_queries(store, cfg.state_tokens, cfg.d_model, &mut rng)))
    }
    fn needs_state(&self) -> bool {
        false
    }
    fn ground(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        brains: &Brains,
        sgca: &Sgca,
        instr: &InstructionEmbedding,
        obs: &[Observation],
        _state_tokens: Option<Var>,
    ) -> Result<SgcaOutput> {
        let imag = brains.right_forward(g, store, instr, obs)?;
        sgca.forward(g, store, None, &imag)
    }
}

struct Baseline;

impl Variant for Baseline {
    fn name(&self) -> &'static str {
        "baseline"
    }
    fn summary(&self) -> &'static str {
        "no SGCA and no injection"
    }
    fn build(&self, _store: &mut ParamStore, _cfg: &ModelConfig, _rng: &mut dyn rand::RngCore) -> Result<Option<Sgca>> {
        Ok(None)
    }
    fn needs_state(&self) -> bool {
        false
    }
    fn ground(
        &self,
        _g: &mut Graph,
        _store: &ParamStore,
        _brains: &Brains,
        _sgca: &Sgca,
        _instr: &InstructionEmbedding,
        _obs: &[Observation],
        _state_tokens: Option<Var>,
    ) -> Result<SgcaOutput> {
        Err(Error::Config("the baseline variant has no grounding path".into()))
    }
}

pub fn variants() -> &'static Registry<dyn Variant> {
    static REGISTRY: OnceLock<Registry<dyn Variant>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn Variant> = Registry::new("variant");
        r.register("full", Box::new(Full))
            .register("se_only", Box::new(SeOnly))
            .register("im_only", Box::new(ImOnly))
            .register("baseline", Box::new(Baseline));
        r
    })
}

/// `none` is accepted as an alias of `full`.
pub fn variant(name: &str) -> Result<&'static dyn Variant> {
    variants().get(if name == "none" { "full" } else { name })
}
