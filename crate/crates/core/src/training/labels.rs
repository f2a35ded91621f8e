//! Pseudo labels for sampled rollouts.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::graphworld::{DistanceTable, NavGraph, NodeId};
use crate::policy::{Action, TopoMemory};
use crate::registry::Registry;

/// Read-only view of a partial map, independent of what the nodes carry.
pub trait MemoryGraph {
    fn current_node(&self) -> Option<NodeId>;
    fn contains_node(&self, id: NodeId) -> bool;
    fn memory_distance(&self, a: NodeId, b: NodeId) -> Option<f64>;
    /// Selectable nodes besides STOP.
    fn candidate_nodes(&self, include_visited: bool) -> Vec<NodeId>;
}

impl<E: Clone> MemoryGraph for TopoMemory<E> {
    fn current_node(&self) -> Option<NodeId> {
        self.current()
    }
    fn contains_node(&self, id: NodeId) -> bool {
        self.contains(id)
    }
    fn memory_distance(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.distance(a, b).ok()
    }
    fn candidate_nodes(&self, include_visited: bool) -> Vec<NodeId> {
        self.action_nodes(include_visited)
    }
}

pub struct LabelContext<'a> {
    pub world: &'a NavGraph,
    pub table: &'a DistanceTable,
    pub goal: NodeId,
    pub radius: f64,
    pub include_visited: bool,
}

pub trait PseudoLabeler: Send + Sync {
    fn name(&self) -> &'static str;
    fn label(&self, mem: &dyn MemoryGraph, ctx: &LabelContext) -> Result<Action>;
}

/// Lowest score wins; equal scores go to the smaller node id.
fn argmin_by(mut candidates: Vec<NodeId>, mut score: impl FnMut(NodeId) -> Result<f64>) -> Result<Action> {
    candidates.sort_unstable();
    let mut best: Option<(NodeId, f64)> = None;
    for v in candidates {
        let s = score(v)?;
        if best.is_none_or(|(_, b)| s < b) {
            best = Some((v, s));
        }
    }
    Ok(best.map_or(Action::Stop, |(v, _)| Action::Node(v)))
}

fn current_of(mem: &dyn MemoryGraph) -> Result<NodeId> {
    mem.current_node().ok_or(Error::Empty("topological memory"))
}

/// `d_memory(current, v) + d_world(v, goal)`.
struct Combined;

impl PseudoLabeler for Combined {
    fn name(&self) -> &'static str {
        "combined"
    }
    fn label(&self, mem: &dyn MemoryGraph, ctx: &LabelContext) -> Result<Action> {
        let cur = current_of(mem)?;
        if ctx.table.try_distance(cur, ctx.goal)? < ctx.radius {
            return Ok(Action::Stop);
        }
        argmin_by(mem.candidate_nodes(ctx.include_visited), |v| {
            let dm = mem.memory_distance(cur, v).ok_or(Error::UnknownNode(v))?;
            Ok(dm + ctx.table.try_distance(v, ctx.goal)?)
        })
    }
}

/// Uses only the partial map: memory distance to the goal when the goal has
/// been observed, straight-line distance otherwise.
struct Partial;

impl PseudoLabeler for Partial {
    fn name(&self) -> &'static str {
        "partial"
    }
    fn label(&self, mem: &dyn MemoryGraph, ctx: &LabelContext) -> Result<Action> {
        let cur = current_of(mem)?;
        ctx.world.check_node(ctx.goal)?;
        let goal_known = mem.contains_node(ctx.goal);
        if cur == ctx.goal || (goal_known && mem.memory_distance(cur, ctx.goal).unwrap_or(f64::INFINITY) < ctx.radius) {
            return Ok(Action::Stop);
        }
        let g = ctx.world.position(ctx.goal);
        argmin_by(mem.candidate_nodes(ctx.include_visited), |v| {
            let dm = mem.memory_distance(cur, v).ok_or(Error::UnknownNode(v))?;
            let rest = if goal_known {
                mem.memory_distance(v, ctx.goal).unwrap_or(f64::INFINITY)
            } else {
                let p = ctx.world.position(v);
                ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt()
            };
            Ok(dm + rest)
        })
    }
}

pub fn pseudo_labelers() -> &'static Registry<dyn PseudoLabeler> {
    static REGISTRY: OnceLock<Registry<dyn PseudoLabeler>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn PseudoLabeler> = Registry::new("pseudo-label mode");
        r.register("combined", Box::new(Combined)).register("partial", Box::new(Partial));
        r
    })
}

pub fn pseudo_labeler(name: &str) -> Result<&'static dyn PseudoLabeler> {
    pseudo_labelers().get(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphworld::{observations, WorldConfig};

    fn path_world() -> NavGraph {
        let cfg = WorldConfig { node_count: 4, ..WorldConfig::default() };
        NavGraph::from_parts(
            0,
            0,
            cfg,
            vec![[0.0, 0.0], [4.0, 0.0], [8.0, 0.0], [12.0, 0.0]],
            vec![0, 1, 2, 3],
            vec![vec![0.0]; 4],
            &[(0, 1, 4.0), (1, 2, 4.0), (2, 3, 4.0)],
        )
        .unwrap()
    }

    fn memory_at(world: &NavGraph, walk: &[NodeId]) -> TopoMemory<()> {
        let mut m = TopoMemory::new();
        for (t, &v) in walk.iter().enumerate() {
            let o = observations(world, v, 0.0).unwrap();
            let n = o.len();
            m.update(v, world.view_feature(v), &o, vec![None; n], t).unwrap();
        }
        m
    }

    #[test]
    fn adjacent_goal_and_stop_cases() {
        let w = path_world();
        let table = DistanceTable::new(&w);
        for labeler in pseudo_labelers().names() {
            let l = pseudo_labeler(labeler).unwrap();
            let ctx = |goal| LabelContext { world: &w, table: &table, goal, radius: 3.0, include_visited: true };
            let m = memory_at(&w, &[0, 1]);
            assert_eq!(l.label(&m, &ctx(2)).unwrap(), Action::Node(2), "{labeler}");
            assert_eq!(l.label(&m, &ctx(1)).unwrap(), Action::Stop, "{labeler}");
            assert_eq!(l.label(&m, &ctx(0)).unwrap(), Action::Node(0), "{labeler}");
        }
    }
}
