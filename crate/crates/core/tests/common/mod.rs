//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use atd_core::graphworld::{NavGraph, NodeId, WorldConfig};
use atd_core::policy::{Action, TopoMemory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Connected graph on `n` nodes with integer edge lengths in `1..=9`: a
/// random spanning tree plus random extra edges.
pub fn random_graph(n: usize, seed: u64) -> NavGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    let has = |u: usize, v: usize, edges: &Vec<(usize, usize, f64)>| {
        edges.iter().any(|&(a, b, _)| (a, b) == (u.min(v), u.max(v)))
    };
    for v in 1..n {
        let u = rng.random_range(0..v);
        edges.push((u, v, rng.random_range(1..=9) as f64));
    }
    for _ in 0..n {
        let (u, v) = (rng.random_range(0..n), rng.random_range(0..n));
        if u != v && !has(u, v, &edges) {
            edges.push((u.min(v), u.max(v), rng.random_range(1..=9) as f64));
        }
    }
    let positions = (0..n).map(|_| [rng.random_range(0.0..30.0), rng.random_range(0.0..30.0)]).collect();
    let cfg = WorldConfig { node_count: n, ..WorldConfig::default() };
    let landmarks = (0..n).map(|i| i % cfg.landmark_vocab).collect();
    let features = (0..n).map(|_| vec![0.0; cfg.feature_dim]).collect();
    NavGraph::from_parts(seed, seed, cfg, positions, landmarks, features, &edges).unwrap()
}

/// Minimum length over every simple path from `a` to `b`.
pub fn enumerate_shortest(g: &NavGraph, a: NodeId, b: NodeId) -> Option<f64> {
    fn dfs(g: &NavGraph, v: NodeId, b: NodeId, len: f64, seen: &mut Vec<bool>, best: &mut Option<f64>) {
        if v == b {
            if best.is_none_or(|x| len < x) {
                *best = Some(len);
            }
            return;
        }
        for &(w, l) in g.neighbors(v) {
            if !seen[w] {
                seen[w] = true;
                dfs(g, w, b, len + l, seen, best);
                seen[w] = false;
            }
        }
    }
    let mut seen = vec![false; g.node_count()];
    seen[a] = true;
    let mut best = None;
    dfs(g, a, b, 0.0, &mut seen, &mut best);
    best
}

/// All-pairs distances over an explicit edge list (Floyd–Warshall).
pub fn floyd(nodes: &[NodeId], edges: &[(NodeId, NodeId, f64)]) -> BTreeMap<(NodeId, NodeId), f64> {
    let mut d = BTreeMap::new();
    for &u in nodes {
        for &v in nodes {
            d.insert((u, v), if u == v { 0.0 } else { f64::INFINITY });
        }
    }
    for &(u, v, l) in edges {
        let e = d.get_mut(&(u, v)).unwrap();
        *e = e.min(l);
        let e = d.get_mut(&(v, u)).unwrap();
        *e = e.min(l);
    }
    for &k in nodes {
        for &i in nodes {
            for &j in nodes {
                let via = d[&(i, k)] + d[&(k, j)];
                if via < d[&(i, j)] {
                    d.insert((i, j), via);
                }
            }
        }
    }
    d
}

/// Scores every candidate by `d_memory(cur, v) + d_world(v, goal)` with both
/// distances recomputed from scratch; STOP inside the radius.
pub fn oracle_combined_label<E: Clone>(
    world: &NavGraph,
    mem: &TopoMemory<E>,
    goal: NodeId,
    radius: f64,
    include_visited: bool,
) -> Action {
    let cur = mem.current().unwrap();
    if enumerate_shortest(world, cur, goal).unwrap() < radius {
        return Action::Stop;
    }
    let ids: Vec<NodeId> = mem.nodes().iter().map(|n| n.id).collect();
    let edges: Vec<_> = mem.edges().collect();
    let dm = floyd(&ids, &edges);
    let mut scored: Vec<(f64, NodeId)> = mem
        .nodes()
        .iter()
        .filter(|n| n.id != cur)
        .filter(|n| include_visited || n.status == atd_core::policy::NodeStatus::Frontier)
        .map(|n| (dm[&(cur, n.id)] + enumerate_shortest(world, n.id, goal).unwrap(), n.id))
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    scored.first().map_or(Action::Stop, |&(_, v)| Action::Node(v))
}

/// Per-episode metrics straight from the definitions, using the enumeration oracle.
pub struct OracleMetrics {
    pub tl: f64,
    pub ne: f64,
    pub s: u8,
    pub os: u8,
    pub spl: f64,
}

pub fn oracle_metrics(world: &NavGraph, path: &[NodeId], gt: &[NodeId], goal: NodeId, eps: f64) -> OracleMetrics {
    let d = |a, b| enumerate_shortest(world, a, b).unwrap();
    let tl: f64 = path.windows(2).map(|w| d(w[0], w[1])).sum();
    let ne = d(*path.last().unwrap(), goal);
    let s = u8::from(ne < eps);
    let os = u8::from(path.iter().map(|&v| d(v, goal)).fold(f64::INFINITY, f64::min) < eps);
    let lgt: f64 = gt.windows(2).map(|w| d(w[0], w[1])).sum();
    let spl = f64::from(s) * lgt / tl.max(lgt);
    OracleMetrics { tl, ne, s, os, spl }
}
