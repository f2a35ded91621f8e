//! Episode rollouts: teacher-forced, sampled with pseudo labels, and greedy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::brains::InstructionEmbedding;
use crate::error::{Error, Result};
use crate::graphworld::{DistanceTable, Episode, NavGraph, START_HEADING};
use crate::metrics::{StepRecord, Trajectory};
use crate::model::Model;
use crate::params::ParamStore;
use crate::policy::{Action, TopoMemory};
use crate::sgca::AttentionRecord;

use super::labels::{LabelContext, PseudoLabeler};

/// Everything a rollout may read about the environment.
#[derive(Clone, Copy)]
pub struct EpisodeEnv<'a> {
    pub world: &'a NavGraph,
    pub table: &'a DistanceTable,
    pub episode: &'a Episode,
}

#[allow(clippy::large_enum_variant)]
pub enum Driver<'a> {
    /// Follow the ground-truth path; supervise with its actions.
    Teacher,
    /// Sample from the policy; supervise with pseudo labels.
    Sample { rng: ChaCha8Rng, labeler: &'a dyn PseudoLabeler },
    /// Take the most probable action; no supervision.
    Greedy,
}

pub struct RolloutOutput {
    pub trajectory: Trajectory,
    /// One `-log π(target)` per supervised decision.
    pub losses: Vec<Var>,
    /// Targets paired with `losses`.
    pub targets: Vec<Action>,
    pub records: Vec<AttentionRecord>,
    /// Memory as it stood before each decision; kept only when requested.
    pub memories: Vec<TopoMemory<Var>>,
}

/// Sampling stream for one episode of one optimisation step.
pub fn sampling_rng(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index + 1);
    rng
}

#[allow(clippy::too_many_arguments)]
pub fn rollout(
    model: &Model,
    g: &mut Graph,
    store: &ParamStore,
    instr: &InstructionEmbedding,
    env: EpisodeEnv,
    mut driver: Driver,
    step_cap: usize,
    keep_memories: bool,
) -> Result<RolloutOutput> {
    let ep = env.episode;
    let gt = &ep.gt_path;
    let cap = match driver {
        Driver::Teacher => gt.len(),
        _ => step_cap,
    };
    let mut mem: TopoMemory<Var> = TopoMemory::new();
    let mut current = ep.start;
    let mut heading = START_HEADING;
    let mut path = vec![current];
    let mut steps = Vec::new();
    let mut losses = Vec::new();
    let mut targets = Vec::new();
    let mut records = Vec::new();
    let mut memories = Vec::new();
    for t in 0..cap {
        let p = model.perceive(g, store, instr, &mut mem, env.world, current, heading, t)?;
        records.extend(p.records.into_iter().map(|mut r| {
            r.episode_id = ep.id.clone();
            r
        }));
        let out = model.act(g, store, &mem, instr)?;
        if keep_memories {
            memories.push(mem.clone());
        }
        let action = match &mut driver {
            Driver::Teacher => {
                let target = if t + 1 < gt.len() { Action::Node(gt[t + 1]) } else { Action::Stop };
                losses.push(out.nll(g, target).map_err(|e| {
                    Error::Target(format!("ground-truth action outside the action support at step {t}: {e}"))
                })?);
                targets.push(target);
                target
            }
            Driver::Sample { rng, labeler } => {
                let ctx = LabelContext {
                    world: env.world,
                    table: env.table,
                    goal: ep.goal,
                    radius: ep.success_radius,
                    include_visited: model.policy.score_visited(),
                };
                let label = labeler.label(&mem, &ctx)?;
                losses.push(out.nll(g, label)?);
                targets.push(label);
                out.distribution.sample_with(rng.random::<f64>())
            }
            Driver::Greedy => out.distribution.argmax(),
        };
        steps.push(StepRecord {
            step: t,
            current,
            candidates: out.distribution.actions.clone(),
            action,
            probs: out.distribution.probs.clone(),
            stop: action == Action::Stop,
        });
        match action {
            Action::Stop => break,
            Action::Node(v) => {
                let route = mem.path(current, v)?;
                path.extend_from_slice(&route[1..]);
                heading = env.world.heading_between(route[route.len() - 2], v);
                current = v;
            }
        }
    }
    let trajectory = Trajectory { episode_id: ep.id.clone(), world_id: ep.world_id, path, steps };
    Ok(RolloutOutput { trajectory, losses, targets, records, memories })
}

fn sum(g: &mut Graph, terms: &[Var]) -> Var {
    match terms.len() {
        0 => g.constant(crate::tensor::Matrix::scalar(0.0)),
        1 => terms[0],
        _ => {
            let cat = g.concat_rows(terms);
            g.sum(cat)
        }
    }
}

/// Teacher-forced `-Σ log π(a*_t)` along the ground-truth path, ending with STOP.
pub fn bc_loss(
    model: &Model,
    g: &mut Graph,
    store: &ParamStore,
    instr: &InstructionEmbedding,
    env: EpisodeEnv,
) -> Result<Var> {
    let out = rollout(model, g, store, instr, env, Driver::Teacher, 0, false)?;
    Ok(sum(g, &out.losses))
}

/// Sampled rollout supervised by pseudo labels; returns the loss and the
/// rollout for inspection.
#[allow(clippy::too_many_arguments)]
pub fn pid_rollout_loss(
    model: &Model,
    g: &mut Graph,
    store: &ParamStore,
    instr: &InstructionEmbedding,
    env: EpisodeEnv,
    labeler: &dyn PseudoLabeler,
    rng: ChaCha8Rng,
    step_cap: usize,
) -> Result<(Var, RolloutOutput)> {
    let out = rollout(model, g, store, instr, env, Driver::Sample { rng, labeler }, step_cap, false)?;
    Ok((sum(g, &out.losses), out))
}

/// Greedy evaluation rollout on an inference tape.
pub fn greedy_rollout(model: &Model, store: &ParamStore, env: EpisodeEnv, step_cap: usize) -> Result<RolloutOutput> {
    let mut g = Graph::inference();
    let instr = model.encode(&mut g, store, &env.episode.instruction)?;
    rollout(model, &mut g, store, &instr, env, Driver::Greedy, step_cap, false)
}
