//! Synthetic navigation worlds.
//!
//! A world is a connected planar graph: nodes carry a 2-D position, a
//! landmark label and a view feature (landmark one-hot followed by seeded
//! Gaussian noise); edges are undirected with Euclidean length. Episodes are
//! start/goal pairs with the shortest path between them and a rule-based
//! instruction describing that path.

mod episode;
mod instruction;
mod io;
mod paths;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use episode::{sample_episode, sample_episodes, Episode, EpisodeConfig};
pub use instruction::{
    direction_token, instruction_for_path, observations, wrap_angle, Observation, Token, NUM_SPECIAL_TOKENS,
    START_HEADING,
};
pub use io::{read_episodes, read_world, write_episodes, write_world, WORLD_FORMAT_VERSION};
pub use paths::{shortest_path, DistanceTable};

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub node_count: usize,
    pub max_degree: usize,
    pub landmark_vocab: usize,
    pub feature_dim: usize,
    /// Minimum distance between any two nodes, in meters.
    pub min_separation: f64,
    /// Side of the square region per sqrt(node), in meters.
    pub spacing: f64,
    /// Probability of adding each candidate non-tree edge.
    pub extra_edge_prob: f64,
    pub noise_std: f64,
    pub max_retries: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            node_count: 10,
            max_degree: 3,
            landmark_vocab: 6,
            feature_dim: 16,
            min_separation: 3.5,
            spacing: 5.0,
            extra_edge_prob: 0.5,
            noise_std: 0.3,
            max_retries: 200,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.node_count < 6 {
            return Err(Error::Config(format!("node_count {} < 6 is too small for navigation", self.node_count)));
        }
        if self.node_count > 200 {
            return Err(Error::Config(format!("node_count {} exceeds 200", self.node_count)));
        }
        if self.landmark_vocab < 4 {
            return Err(Error::Config(format!("landmark_vocab {} < 4", self.landmark_vocab)));
        }
        if self.feature_dim < self.landmark_vocab {
            return Err(Error::Config(format!(
                "feature_dim {} smaller than landmark_vocab {}",
                self.feature_dim, self.landmark_vocab
            )));
        }
        if !(self.min_separation > 0.0 && self.spacing > 0.0) {
            return Err(Error::Config("min_separation and spacing must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NavGraph {
    pub world_id: u64,
    pub seed: u64,
    pub config: WorldConfig,
    positions: Vec<[f64; 2]>,
    landmarks: Vec<usize>,
    features: Vec<Vec<f64>>,
    /// Sorted by neighbor id.
    adjacency: Vec<Vec<(NodeId, f64)>>,
}

impl NavGraph {
    /// Assemble a graph from parts, checking the structural invariants.
    pub fn from_parts(
        world_id: u64,
        seed: u64,
        config: WorldConfig,
        positions: Vec<[f64; 2]>,
        landmarks: Vec<usize>,
        features: Vec<Vec<f64>>,
        edges: &[(NodeId, NodeId, f64)],
    ) -> Result<Self> {
        let n = positions.len();
        if landmarks.len() != n || features.len() != n {
            return Err(Error::Format("node attribute lengths disagree".into()));
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(u, v, len) in edges {
            if u >= n {
                return Err(Error::UnknownNode(u));
            }
            if v >= n {
                return Err(Error::UnknownNode(v));
            }
            if u == v || len.is_nan() || len <= 0.0 {
                return Err(Error::Format(format!("bad edge ({u}, {v}, {len})")));
            }
            if adjacency[u].iter().any(|&(w, _)| w == v) {
                return Err(Error::Format(format!("duplicate edge ({u}, {v})")));
            }
            adjacency[u].push((v, len));
            adjacency[v].push((u, len));
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(w, _)| w);
        }
        Ok(Self { world_id, seed, config, positions, landmarks, features, adjacency })
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn nodes(&self) -> std::ops::Range<NodeId> {
        0..self.positions.len()
    }

    pub fn check_node(&self, v: NodeId) -> Result<()> {
        if v < self.positions.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(v))
        }
    }

    pub fn position(&self, v: NodeId) -> [f64; 2] {
        self.positions[v]
    }

    pub fn landmark(&self, v: NodeId) -> usize {
        self.landmarks[v]
    }

    pub fn view_feature(&self, v: NodeId) -> &[f64] {
        &self.features[v]
    }

    pub fn neighbors(&self, v: NodeId) -> &[(NodeId, f64)] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adjacency[v].len()
    }

    pub fn edge_length(&self, u: NodeId, v: NodeId) -> Option<f64> {
        self.adjacency.get(u)?.iter().find(|&&(w, _)| w == v).map(|&(_, l)| l)
    }

    /// Undirected edges with `u < v`, sorted.
    pub fn edges(&self) -> Vec<(NodeId, NodeId, f64)> {
        let mut out = Vec::new();
        for (u, list) in self.adjacency.iter().enumerate() {
            for &(v, l) in list {
                if u < v {
                    out.push((u, v, l));
                }
            }
        }
        out
    }

    pub fn heading_between(&self, from: NodeId, to: NodeId) -> f64 {
        let (a, b) = (self.positions[from], self.positions[to]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Connectivity by breadth-first search from node 0.
    pub fn is_connected(&self) -> bool {
        let n = self.node_count();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == n
    }

    /// Every structural invariant of a generated world; returns the first
    /// violation found.
    pub fn check_invariants(&self) -> Result<()> {
        if !self.is_connected() {
            return Err(Error::Format("graph is not connected".into()));
        }
        for u in self.nodes() {
            let deg = self.degree(u);
            if deg == 0 || deg > self.config.max_degree {
                return Err(Error::Format(format!("node {u} has degree {deg}")));
            }
            for &(v, l) in self.neighbors(u) {
                if !(l > 0.0) || self.edge_length(v, u) != Some(l) {
                    return Err(Error::Format(format!("edge ({u}, {v}) not symmetric/positive")));
                }
            }
            let mut seen = std::collections::BTreeSet::new();
            for &(v, _) in self.neighbors(u) {
                if !seen.insert(self.landmark(v)) {
                    return Err(Error::Format(format!(
                        "node {u} has two neighbors with landmark {}",
                        self.landmark(v)
                    )));
                }
            }
            if self.features[u].len() != self.config.feature_dim {
                return Err(Error::Format(format!("node {u} feature has wrong dimension")));
            }
        }
        Ok(())
    }
}

/// Generate a connected world. Identical `(config, seed)` give identical graphs.
pub fn generate_world(config: &WorldConfig, world_id: u64, seed: u64) -> Result<NavGraph> {
    config.validate()?;
    if config.max_degree < 2 {
        return Err(Error::Infeasible(format!(
            "max_degree {} cannot connect {} nodes",
            config.max_degree, config.node_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..config.max_retries {
        if let Some(g) = try_generate(config, world_id, seed, &mut rng) {
            debug_assert!(g.check_invariants().is_ok());
            return Ok(g);
        }
    }
    Err(Error::Infeasible(format!("no valid world after {} attempts", config.max_retries)))
}

fn try_generate(config: &WorldConfig, world_id: u64, seed: u64, rng: &mut ChaCha8Rng) -> Option<NavGraph> {
    let n = config.node_count;
    let side = config.spacing * (n as f64).sqrt();
    let positions = sample_positions(n, side, config.min_separation, rng)?;
    let dist = |a: usize, b: usize| {
        let (p, q) = (positions[a], positions[b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    };

    // Degree-bounded Prim spanning tree.
    let mut degree = vec![0usize; n];
    let mut in_tree = vec![false; n];
    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(2 * n);
    in_tree[0] = true;
    for _ in 1..n {
        let mut best: Option<(f64, usize, usize)> = None;
        for u in (0..n).filter(|&u| in_tree[u] && degree[u] < config.max_degree) {
            for v in (0..n).filter(|&v| !in_tree[v]) {
                let d = dist(u, v);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, u, v));
                }
            }
        }
        let (_, u, v) = best?;
        in_tree[v] = true;
        degree[u] += 1;
        degree[v] += 1;
        edges.push((u.min(v), u.max(v)));
    }

    // Extra short edges to create loops.
    let reach = 2.0 * config.spacing;
    for u in 0..n {
        let mut near: Vec<usize> = (0..n).filter(|&v| v != u).collect();
        near.sort_by(|&a, &b| dist(u, a).total_cmp(&dist(u, b)).then(a.cmp(&b)));
        for &v in near.iter().take(3) {
            let e = (u.min(v), u.max(v));
            let p: f64 = rng.random();
            if dist(u, v) <= reach
                && p < config.extra_edge_prob
                && degree[u] < config.max_degree
                && degree[v] < config.max_degree
                && !edges.contains(&e)
            {
                degree[u] += 1;
                degree[v] += 1;
                edges.push(e);
            }
        }
    }
    edges.sort();

    let mut adj = vec![Vec::new(); n];
    for &(u, v) in &edges {
        adj[u].push(v);
        adj[v].push(u);
    }

    // Landmarks: no two neighbors of any node share a label.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut landmarks = vec![usize::MAX; n];
    for &u in &order {
        let mut banned = vec![false; config.landmark_vocab];
        for &w in &adj[u] {
            for &x in &adj[w] {
                if x != u && landmarks[x] != usize::MAX {
                    banned[landmarks[x]] = true;
                }
            }
        }
        let allowed: Vec<usize> = (0..config.landmark_vocab).filter(|&l| !banned[l]).collect();
        landmarks[u] = *allowed.choose(rng)?;
    }

    let normal = Normal::new(0.0, config.noise_std.max(0.0)).ok()?;
    let features = landmarks
        .iter()
        .map(|&l| {
            let mut f = vec![0.0; config.feature_dim];
            f[l] = 1.0;
            for x in f.iter_mut().skip(config.landmark_vocab) {
                *x = normal.sample(rng);
            }
            f
        })
        .collect();

    let weighted: Vec<(usize, usize, f64)> = edges.iter().map(|&(u, v)| (u, v, dist(u, v))).collect();
    NavGraph::from_parts(world_id, seed, config.clone(), positions, landmarks, features, &weighted).ok()
}

fn sample_positions(n: usize, side: f64, min_sep: f64, rng: &mut ChaCha8Rng) -> Option<Vec<[f64; 2]>> {
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut attempts = 0;
    while pts.len() < n {
        attempts += 1;
        if attempts > 200 * n {
            return None;
        }
        let p = [rng.random::<f64>() * side, rng.random::<f64>() * side];
        if pts.iter().all(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= min_sep) {
            pts.push(p);
        }
    }
    Some(pts)
}
