//! Navigation metrics: trajectory length, navigation error, success, oracle
//! success and success weighted by path length.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphworld::{DistanceTable, Episode, NavGraph, NodeId};
use crate::policy::Action;

/// One decision of a rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub current: NodeId,
    pub candidates: Vec<Action>,
    pub action: Action,
    pub probs: Vec<f64>,
    pub stop: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: String,
    pub world_id: u64,
    /// Every node visited, including intermediate nodes of memory paths.
    pub path: Vec<NodeId>,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessMode {
    /// Success when the shortest-path distance to the goal is `< ε`.
    #[default]
    Threshold,
    /// Success when the final node belongs to the goal set `{goal}`.
    GoalSet,
}

fn pair_distance(world: &NavGraph, table: Option<&DistanceTable>, a: NodeId, b: NodeId) -> Result<f64> {
    world.check_node(a)?;
    world.check_node(b)?;
    let d = match table {
        Some(t) => t.distance(a, b),
        None => crate::graphworld::shortest_path(world, a, b)?.1,
    };
    if d.is_finite() {
        Ok(d)
    } else {
        Err(Error::Unreachable(a, b))
    }
}

/// Sum of shortest-path distances between consecutive nodes.
pub fn trajectory_length(world: &NavGraph, path: &[NodeId]) -> Result<f64> {
    trajectory_length_with(world, None, path)
}

fn trajectory_length_with(world: &NavGraph, table: Option<&DistanceTable>, path: &[NodeId]) -> Result<f64> {
    if path.is_empty() {
        return Err(Error::InvalidPath("empty trajectory".into()));
    }
    let mut total = 0.0;
    for w in path.windows(2) {
        total += pair_distance(world, table, w[0], w[1])?;
    }
    if path.len() == 1 {
        world.check_node(path[0])?;
    }
    Ok(total)
}

pub fn navigation_error(world: &NavGraph, path: &[NodeId], goal: NodeId) -> Result<f64> {
    let last = *path.last().ok_or_else(|| Error::InvalidPath("empty trajectory".into()))?;
    pair_distance(world, None, last, goal)
}

pub fn success(world: &NavGraph, path: &[NodeId], goal: NodeId, epsilon: f64) -> Result<u8> {
    Ok(u8::from(navigation_error(world, path, goal)? < epsilon))
}

pub fn oracle_success(world: &NavGraph, path: &[NodeId], goal: NodeId, epsilon: f64) -> Result<u8> {
    for &v in path {
        if pair_distance(world, None, v, goal)? < epsilon {
            return Ok(1);
        }
    }
    Ok(0)
}

pub fn spl(s: u8, l_gt: f64, l_traj: f64) -> Result<f64> {
    if !(l_gt > 0.0) {
        return Err(Error::InvalidPath(format!("ground-truth length must be positive, got {l_gt}")));
    }
    Ok(if s == 0 { 0.0 } else { l_gt / l_traj.max(l_gt) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode_id: String,
    pub tl: f64,
    pub ne: f64,
    pub success: u8,
    pub oracle_success: u8,
    pub spl: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epsilon: f64,
    pub mode: SuccessMode,
    pub episode_count: usize,
    pub aggregate: Aggregates,
    pub episodes: Vec<EpisodeMetrics>,
}

pub fn episode_metrics(
    world: &NavGraph,
    table: &DistanceTable,
    episode: &Episode,
    path: &[NodeId],
    epsilon: f64,
    mode: SuccessMode,
) -> Result<EpisodeMetrics> {
    let tl = trajectory_length_with(world, Some(table), path)?;
    let last = *path.last().expect("non-empty path");
    let ne = pair_distance(world, Some(table), last, episode.goal)?;
    let (s, os) = match mode {
        SuccessMode::Threshold => {
            let mut os = 0;
            for &v in path {
                if pair_distance(world, Some(table), v, episode.goal)? < epsilon {
                    os = 1;
                }
            }
            (u8::from(ne < epsilon), os)
        }
        SuccessMode::GoalSet => (u8::from(last == episode.goal), u8::from(path.contains(&episode.goal))),
    };
    let l_gt = trajectory_length_with(world, Some(table), &episode.gt_path)?;
    Ok(EpisodeMetrics {
        episode_id: episode.id.clone(),
        tl,
        ne,
        success: s,
        oracle_success: os,
        spl: spl(s, l_gt, tl)?,
    })
}

/// Per-episode metrics in episode order plus arithmetic-mean aggregates.
pub fn evaluate(
    worlds: &[NavGraph],
    episodes: &[Episode],
    trajectories: &[Trajectory],
    epsilon: f64,
    mode: SuccessMode,
) -> Result<MetricsReport> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let by_id: HashMap<&str, &Trajectory> = trajectories.iter().map(|t| (t.episode_id.as_str(), t)).collect();
    let known: HashMap<&str, ()> = episodes.iter().map(|e| (e.id.as_str(), ())).collect();
    let mut unmatched: Vec<&str> =
        episodes.iter().filter(|e| !by_id.contains_key(e.id.as_str())).map(|e| e.id.as_str()).collect();
    unmatched.extend(
        trajectories.iter().filter(|t| !known.contains_key(t.episode_id.as_str())).map(|t| t.episode_id.as_str()),
    );
    if !unmatched.is_empty() {
        return Err(Error::Format(format!("unmatched trajectories/episodes: {}", unmatched.join(", "))));
    }
    let world_by_id: HashMap<u64, &NavGraph> = worlds.iter().map(|w| (w.world_id, w)).collect();
    let mut tables: BTreeMap<u64, DistanceTable> = BTreeMap::new();
    let mut rows = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let world = world_by_id
            .get(&ep.world_id)
            .ok_or_else(|| Error::Format(format!("episode {} refers to unknown world {}", ep.id, ep.world_id)))?;
        let table = tables.entry(ep.world_id).or_insert_with(|| DistanceTable::new(world));
        rows.push(episode_metrics(world, table, ep, &by_id[ep.id.as_str()].path, epsilon, mode)?);
    }
    Ok(report_from(rows, epsilon, mode))
}

pub fn report_from(episodes: Vec<EpisodeMetrics>, epsilon: f64, mode: SuccessMode) -> MetricsReport {
    let n = episodes.len();
    let mut agg = Aggregates::default();
    if n > 0 {
        for e in &episodes {
            agg.tl += e.tl;
            agg.ne += e.ne;
            agg.sr += f64::from(e.success);
            agg.osr += f64::from(e.oracle_success);
            agg.spl += e.spl;
        }
        let k = n as f64;
        agg = Aggregates { tl: agg.tl / k, ne: agg.ne / k, sr: agg.sr / k, osr: agg.osr / k, spl: agg.spl / k };
    }
    MetricsReport { epsilon, mode, episode_count: n, aggregate: agg, episodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphworld::WorldConfig;

    /// 0 -1- 1 -2- 2 -3- 3, plus a 2.5 m spur 3 - 4
    fn line() -> NavGraph {
        let cfg = WorldConfig { node_count: 5, ..WorldConfig::default() };
        NavGraph::from_parts(
            0,
            0,
            cfg,
            vec![[0.0, 0.0], [1.0, 0.0], [3.0, 0.0], [6.0, 0.0], [6.0, 2.5]],
            vec![0, 1, 2, 3, 4],
            vec![vec![0.0]; 5],
            &[(0, 1, 1.0), (1, 2, 2.0), (2, 3, 3.0), (3, 4, 2.5)],
        )
        .unwrap()
    }

    #[test]
    fn closed_forms() {
        let w = line();
        assert_eq!(trajectory_length(&w, &[2]).unwrap(), 0.0);
        assert_eq!(trajectory_length(&w, &[0, 1, 2, 3]).unwrap(), 6.0);
        assert_eq!(navigation_error(&w, &[0, 1, 2, 3], 3).unwrap(), 0.0);
        assert_eq!(navigation_error(&w, &[0, 1, 2, 3, 4], 3).unwrap(), 2.5);
        assert_eq!(success(&w, &[4], 3, 3.0).unwrap(), 1);
        assert_eq!(success(&w, &[0, 1, 2, 3], 1, 3.0).unwrap(), 0);
        assert_eq!(oracle_success(&w, &[2, 3, 2, 1, 0], 3, 3.0).unwrap(), 1);
        assert_eq!(success(&w, &[2, 3, 2, 1, 0], 3, 3.0).unwrap(), 0);
        assert_eq!(spl(1, 10.0, 20.0).unwrap(), 0.5);
        assert_eq!(spl(1, 10.0, 5.0).unwrap(), 1.0);
        assert_eq!(spl(0, 10.0, 10.0).unwrap(), 0.0);
        assert!(spl(1, 0.0, 1.0).is_err());
        assert!(trajectory_length(&w, &[0, 9]).is_err());
    }

    #[test]
    fn evaluate_rejects_unmatched_and_aggregates_perfect_runs() {
        let w = line();
        let ep = Episode {
            id: "a".into(),
            world_id: 0,
            start: 0,
            goal: 3,
            gt_path: vec![0, 1, 2, 3],
            instruction: vec![0],
            success_radius: 3.0,
        };
        let t = Trajectory { episode_id: "a".into(), world_id: 0, path: vec![0, 1, 2, 3], steps: vec![] };
        let r = evaluate(
            std::slice::from_ref(&w),
            std::slice::from_ref(&ep),
            std::slice::from_ref(&t),
            3.0,
            SuccessMode::Threshold,
        )
        .unwrap();
        assert_eq!(r.aggregate, Aggregates { tl: 6.0, ne: 0.0, sr: 1.0, osr: 1.0, spl: 1.0 });
        let stray = Trajectory { episode_id: "zzz".into(), ..t };
        let err = evaluate(&[w], &[ep], &[stray], 3.0, SuccessMode::Threshold).unwrap_err().to_string();
        assert!(err.contains("zzz") && err.contains('a'));
    }
}
