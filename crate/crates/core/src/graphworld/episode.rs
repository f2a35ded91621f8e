use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{instruction_for_path, DistanceTable, NavGraph, NodeId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub min_hops: usize,
    pub max_hops: usize,
    pub success_radius: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { min_hops: 3, max_hops: 7, success_radius: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub world_id: u64,
    pub start: NodeId,
    pub goal: NodeId,
    pub gt_path: Vec<NodeId>,
    pub instruction: Vec<usize>,
    pub success_radius: f64,
}

impl Episode {
    pub fn hops(&self) -> usize {
        self.gt_path.len() - 1
    }
}

/// Start/goal pairs whose shortest path has a hop count inside the bounds.
fn feasible_pairs(table: &DistanceTable, cfg: &EpisodeConfig) -> Vec<(NodeId, NodeId)> {
    let n = table.node_count();
    let mut pairs = Vec::new();
    for s in 0..n {
        for t in 0..n {
            let hops = table.hops(s, t);
            if (s != t || cfg.min_hops == 0) && hops >= cfg.min_hops && hops <= cfg.max_hops {
                pairs.push((s, t));
            }
        }
    }
    pairs
}

pub fn sample_episode(graph: &NavGraph, cfg: &EpisodeConfig, seed: u64) -> Result<Episode> {
    let mut v = sample_episodes(graph, cfg, 1, seed)?;
    Ok(v.remove(0))
}

/// `count` episodes drawn uniformly (with replacement) from the feasible
/// start/goal pairs.
pub fn sample_episodes(graph: &NavGraph, cfg: &EpisodeConfig, count: usize, seed: u64) -> Result<Vec<Episode>> {
    if cfg.min_hops > cfg.max_hops {
        return Err(Error::Config(format!("min_hops {} > max_hops {}", cfg.min_hops, cfg.max_hops)));
    }
    if !(cfg.success_radius > 0.0) {
        return Err(Error::Config("success_radius must be positive".into()));
    }
    let table = DistanceTable::new(graph);
    let pairs = feasible_pairs(&table, cfg);
    if pairs.is_empty() {
        return Err(Error::Infeasible(format!(
            "world {} has no start/goal pair with {}..={} hops",
            graph.world_id, cfg.min_hops, cfg.max_hops
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (start, goal) = pairs[rng.random_range(0..pairs.len())];
            let gt_path = table.path(start, goal);
            let instruction = instruction_for_path(graph, &gt_path)?;
            Ok(Episode {
                id: format!("w{}-e{}", graph.world_id, i),
                world_id: graph.world_id,
                start,
                goal,
                gt_path,
                instruction,
                success_radius: cfg.success_radius,
            })
        })
        .collect()
}
