//! The full agent: both branches, the grounding stack and the policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::brains::{Brains, InstructionEmbedding};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graphworld::{observations, NavGraph, NodeId, Observation};
use crate::params::ParamStore;
use crate::policy::{PolicyNet, PolicyOutput, TopoMemory};
use crate::sgca::{AttentionRecord, Sgca};
use crate::variants::{variant, Variant};

pub const BRAIN_PREFIX: &str = "brains.";

pub struct Model {
    pub config: ModelConfig,
    pub brains: Brains,
    pub sgca: Option<Sgca>,
    pub policy: PolicyNet,
    variant: &'static dyn Variant,
}

/// What one observation step produced.
pub struct Perception {
    pub observations: Vec<Observation>,
    pub records: Vec<AttentionRecord>,
}

fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Model {
    /// Each component draws from its own stream, so variants share the
    /// initial values of every parameter they have in common.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("; ")));
        }
        let variant = variant(&config.variant)?;
        let mut store = ParamStore::new();
        let brains = Brains::new(&mut store, config, &mut component_rng(seed, 1));
        let sgca = variant.build(&mut store, config, &mut component_rng(seed, 2))?;
        let policy = PolicyNet::new(&mut store, config, sgca.is_some(), &mut component_rng(seed, 3));
        Ok((Self { config: config.clone(), brains, sgca, policy, variant }, store))
    }

    pub fn variant(&self) -> &'static dyn Variant {
        self.variant
    }

    /// Whether any branch output reaches the policy.
    pub fn uses_brains(&self) -> bool {
        self.sgca.is_some()
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, instruction: &[usize]) -> Result<InstructionEmbedding> {
        self.brains.encode_instruction(g, store, instruction)
    }

    /// Mean own view of explored nodes (including `current`) followed by a
    /// one-hot of the step index.
    pub fn visited_summary(&self, mem: &TopoMemory<Var>, current: NodeId, own_view: &[f64], step: usize) -> Vec<f64> {
        let f = self.config.feature_dim;
        let mut mean = own_view.to_vec();
        let mut count = 1.0;
        for n in mem.nodes() {
            if n.id != current {
                if let Some(v) = &n.own_view {
                    mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
                    count += 1.0;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut out = mean;
        out.resize(f, 0.0);
        let mut onehot = vec![0.0; self.config.progress_slots];
        onehot[step.min(self.config.progress_slots - 1)] = 1.0;
        out.extend(onehot);
        out
    }

    /// Observe from `current` and record the result in memory.
    #[allow(clippy::too_many_arguments)]
    pub fn perceive(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        instr: &InstructionEmbedding,
        mem: &mut TopoMemory<Var>,
        world: &NavGraph,
        current: NodeId,
        heading: f64,
        step: usize,
    ) -> Result<Perception> {
        let obs = observations(world, current, heading)?;
        let own = world.view_feature(current);
        let (atd, records) = match &self.sgca {
            Some(sgca) => {
                let state = if self.variant.needs_state() {
                    let summary = self.visited_summary(mem, current, own, step);
                    Some(self.brains.left_forward(g, store, instr, &obs, &summary)?.tokens)
                } else {
                    None
                };
                let out = self.variant.ground(g, store, &self.brains, sgca, instr, &obs, state)?;
                let rows: Vec<Option<Var>> = (0..obs.len()).map(|i| Some(g.slice_rows(out.v_atd, i, 1))).collect();
                let mut records = out.records;
                for r in &mut records {
                    r.step = step;
                }
                (rows, records)
            }
            None => (vec![None; obs.len()], Vec::new()),
        };
        mem.update(current, own, &obs, atd, step)?;
        Ok(Perception { observations: obs, records })
    }

    pub fn act(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mem: &TopoMemory<Var>,
        instr: &InstructionEmbedding,
    ) -> Result<PolicyOutput> {
        self.policy.predict_action(g, store, mem, instr)
    }
}
